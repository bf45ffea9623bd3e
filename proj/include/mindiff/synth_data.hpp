#ifndef MINDIFF_SYNTH_DATA_HPP
#define MINDIFF_SYNTH_DATA_HPP

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <vector>

#include "json.hpp"

namespace mindiff {

struct SceneSpec {
    int64_t class_id = 0;
    double cx = 0.5;
    double cy = 0.5;
    double scale = 0.4;  // shape diameter as a fraction of the image side
    uint64_t seed = 0;
};

struct DatasetConfig {
    int64_t k = 10;
    int64_t n_voxels = 512;
    int64_t image_size = 64;
    int64_t train = 1000;
    int64_t val = 100;
    int64_t test = 100;
    double noise_sigma = 0.05;
    uint64_t seed = 0;
    bool shared_classes = true;  // GOD-style: test classes overlap train classes

    nlohmann::json to_json() const;
    static DatasetConfig from_json(const nlohmann::json& j);
};

struct CorpusConfig {
    int64_t signals = 5000;
    int64_t images = 2000;
    uint64_t seed = 0;
};

// image [3,S,S] float in [0,1]; silhouette [S,S] uint8 (exact shape support).
// Deterministic given the spec. class_id selects a superellipse family with a
// per-class squareness exponent and fill color; the seed drives rotation and
// the background gradient. Throws std::domain_error on invalid class_id.
std::pair<torch::Tensor, torch::Tensor> render_scene(const SceneSpec& spec,
                                                     int64_t image_size, int64_t k);

// Fixed deterministic image descriptor: 16x16 downsampled grayscale (256 dims)
// concatenated with a K-dim class-score stub derived from the dominant bright
// color. Length 256 + K.
torch::Tensor image_descriptor(const torch::Tensor& image, int64_t k);
int64_t descriptor_dim(int64_t k);

// Random mixing matrix [N, D], entries N(0,1)/sqrt(D); fixed per dataset.
torch::Tensor make_mixing(int64_t n_voxels, int64_t descriptor_len, uint64_t seed);
// Identity on the first min(N,D) coordinates, zero elsewhere (test fixture).
torch::Tensor identity_padded_mixing(int64_t n_voxels, int64_t descriptor_len);

// voxels = mixing . descriptor(image) + N(0, noise_sigma^2)
torch::Tensor signal_from_image(const torch::Tensor& image, const torch::Tensor& mixing,
                                int64_t k, double noise_sigma, std::mt19937_64& rng);

struct PairedSplit {
    torch::Tensor signals;  // [n, N] float32 (raw, not normalized)
    torch::Tensor images;   // [n, 3, S, S] float32
    torch::Tensor masks;    // [n, S, S] uint8
    torch::Tensor classes;  // [n] int64
    std::vector<SceneSpec> specs;

    int64_t size() const { return signals.size(0); }
};

struct SynthDataset {
    DatasetConfig cfg;
    PairedSplit train, val, test;
    torch::Tensor mixing;    // [N, D]
    torch::Tensor vox_mean;  // [N] train-split per-voxel mean
    torch::Tensor vox_std;   // [N] train-split per-voxel std (>= 1e-6)

    torch::Tensor normalize(const torch::Tensor& signals) const;
    std::set<uint64_t> spec_seeds() const;
};

struct UnlabeledCorpus {
    torch::Tensor signals;  // [n, N]
    torch::Tensor images;   // [m, 3, S, S] unpaired image pool
    std::vector<uint64_t> image_spec_seeds;
};

SynthDataset build_paired_dataset(const DatasetConfig& cfg);

// The image pool is generated from spec seeds disjoint from `excluded_seeds`
// (the paired dataset's test specs); overlap raises std::runtime_error.
UnlabeledCorpus build_unlabeled_corpus(const CorpusConfig& cfg, const DatasetConfig& data_cfg,
                                       const torch::Tensor& mixing,
                                       const std::set<uint64_t>& excluded_seeds);

// On-disk layout:
//   root/manifest.json                 N, H, W, K, seed, noise_sigma, counts,
//                                      z-score parameters, mixing checksum
//   root/mixing.bin
//   root/{train,val,test}/signals.bin  images.bin  masks.bin  meta.json
void save_dataset(const SynthDataset& ds, const std::filesystem::path& root);
SynthDataset ingest_dataset(const std::filesystem::path& root);

void save_corpus(const UnlabeledCorpus& corpus, const std::filesystem::path& root);
UnlabeledCorpus load_corpus(const std::filesystem::path& root);

}  // namespace mindiff

#endif
