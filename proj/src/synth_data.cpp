#include "mindiff/synth_data.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

#include "mindiff/rng.hpp"
#include "mindiff/tensor_io.hpp"

namespace mindiff {

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    double r = 0, g = 0, b = 0;
    double i = std::floor(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1.0 - s);
    double q = v * (1.0 - f * s);
    double t = v * (1.0 - (1.0 - f) * s);
    switch (int(i) % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        case 5: r = v; g = p; b = q; break;
    }
    return {r, g, b};
}

std::array<double, 3> class_color(int64_t class_id, int64_t k) {
    return hsv_to_rgb(double(class_id) / double(k), 0.85, 0.9);
}

double class_exponent(int64_t class_id, int64_t k) {
    if (k <= 1) return 2.0;
    return 2.0 + 6.0 * double(class_id) / double(k - 1);
}

nlohmann::json spec_to_json(const SceneSpec& s) {
    return {{"class_id", s.class_id}, {"cx", s.cx}, {"cy", s.cy},
            {"scale", s.scale}, {"seed", s.seed}};
}

SceneSpec spec_from_json(const nlohmann::json& j) {
    SceneSpec s;
    s.class_id = j.at("class_id");
    s.cx = j.at("cx");
    s.cy = j.at("cy");
    s.scale = j.at("scale");
    s.seed = j.at("seed");
    return s;
}

}  // namespace

nlohmann::json DatasetConfig::to_json() const {
    return {{"k", k}, {"n_voxels", n_voxels}, {"image_size", image_size},
            {"train", train}, {"val", val}, {"test", test},
            {"noise_sigma", noise_sigma}, {"seed", seed},
            {"shared_classes", shared_classes}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
    DatasetConfig c;
    c.k = j.at("k");
    c.n_voxels = j.at("n_voxels");
    c.image_size = j.at("image_size");
    c.train = j.at("train");
    c.val = j.at("val");
    c.test = j.at("test");
    c.noise_sigma = j.at("noise_sigma");
    c.seed = j.at("seed");
    c.shared_classes = j.at("shared_classes");
    return c;
}

std::pair<torch::Tensor, torch::Tensor> render_scene(const SceneSpec& spec,
                                                     int64_t image_size, int64_t k) {
    if (spec.class_id < 0 || spec.class_id >= k)
        throw std::domain_error("render_scene: class_id out of range");
    const int64_t s = image_size;
    auto rng = make_stream(spec.seed, 0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double theta = uni(rng) * 2.0 * M_PI;
    const double grad_dir = uni(rng) * 2.0 * M_PI;

    auto image = torch::empty({3, s, s}, torch::kFloat32);
    auto mask = torch::zeros({s, s}, torch::kUInt8);
    auto im = image.accessor<float, 3>();
    auto mk = mask.accessor<uint8_t, 2>();

    // snap the center to the pixel lattice so that position-only changes are
    // exact integer translates of the silhouette
    const double px = std::round(spec.cx * double(s - 1));
    const double py = std::round(spec.cy * double(s - 1));
    const double a = spec.scale * double(s) / 2.0;
    const double p = class_exponent(spec.class_id, k);
    const auto color = class_color(spec.class_id, k);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double gx = std::cos(grad_dir), gy = std::sin(grad_dir);

    for (int64_t i = 0; i < s; ++i) {
        for (int64_t j = 0; j < s; ++j) {
            const double dx = double(j) - px;
            const double dy = double(i) - py;
            const double u = std::abs(ct * dx + st * dy) / a;
            const double v = std::abs(-st * dx + ct * dy) / a;
            const bool inside = std::pow(u, p) + std::pow(v, p) <= 1.0;
            if (inside) {
                mk[i][j] = 1;
                for (int c = 0; c < 3; ++c) im[c][i][j] = float(color[c]);
            } else {
                const double bg = 0.12 + 0.06 * (gx * (double(j) / double(s - 1) - 0.5) +
                                                 gy * (double(i) / double(s - 1) - 0.5));
                for (int c = 0; c < 3; ++c) im[c][i][j] = float(bg);
            }
        }
    }
    return {image, mask};
}

int64_t descriptor_dim(int64_t k) { return 256 + k; }

torch::Tensor image_descriptor(const torch::Tensor& image, int64_t k) {
    TORCH_CHECK(image.dim() == 3 && image.size(0) == 3, "descriptor: expected [3,H,W]");
    auto gray = image.to(torch::kFloat32).mean(0);  // [H,W]
    auto down = torch::adaptive_avg_pool2d(gray.unsqueeze(0), {16, 16}).flatten();
    auto bright = gray > 0.4;
    auto scores = torch::zeros({k}, torch::kFloat32);
    if (bright.any().item<bool>()) {
        auto flat = image.flatten(1);                    // [3, H*W]
        auto sel = bright.flatten().nonzero().squeeze(1);
        auto mean_rgb = flat.index_select(1, sel).mean(1);  // [3]
        auto sa = scores.accessor<float, 1>();
        auto ma = mean_rgb.accessor<float, 1>();
        double total = 0.0;
        for (int64_t c = 0; c < k; ++c) {
            auto col = class_color(c, k);
            double d2 = 0.0;
            for (int i = 0; i < 3; ++i) d2 += (ma[i] - col[i]) * (ma[i] - col[i]);
            sa[c] = float(std::exp(-d2 / 0.02));
            total += sa[c];
        }
        if (total > 0) scores /= total;
    }
    return torch::cat({down, scores});
}

torch::Tensor make_mixing(int64_t n_voxels, int64_t descriptor_len, uint64_t seed) {
    auto rng = make_stream(seed, 0x4D495821ull);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto m = torch::empty({n_voxels, descriptor_len}, torch::kFloat32);
    auto ma = m.accessor<float, 2>();
    const double scale = 1.0 / std::sqrt(double(descriptor_len));
    for (int64_t i = 0; i < n_voxels; ++i)
        for (int64_t j = 0; j < descriptor_len; ++j) ma[i][j] = float(gauss(rng) * scale);
    return m;
}

torch::Tensor identity_padded_mixing(int64_t n_voxels, int64_t descriptor_len) {
    auto m = torch::zeros({n_voxels, descriptor_len}, torch::kFloat32);
    int64_t d = std::min(n_voxels, descriptor_len);
    m.slice(0, 0, d).slice(1, 0, d).copy_(torch::eye(d, torch::kFloat32));
    return m;
}

torch::Tensor signal_from_image(const torch::Tensor& image, const torch::Tensor& mixing,
                                int64_t k, double noise_sigma, std::mt19937_64& rng) {
    if (noise_sigma < 0) throw std::domain_error("signal_from_image: noise_sigma < 0");
    auto desc = image_descriptor(image, k);
    if (mixing.dim() != 2 || mixing.size(1) != desc.size(0))
        throw std::domain_error("signal_from_image: mixing/descriptor dimension mismatch");
    auto vox = mixing.mv(desc);
    if (noise_sigma > 0) {
        std::normal_distribution<double> gauss(0.0, noise_sigma);
        auto noise = torch::empty_like(vox);
        auto na = noise.accessor<float, 1>();
        for (int64_t i = 0; i < noise.size(0); ++i) na[i] = float(gauss(rng));
        vox = vox + noise;
    }
    return vox;
}

namespace {

SceneSpec sample_spec(const DatasetConfig& cfg, uint64_t global_index, bool test_split) {
    auto rng = make_stream(cfg.seed, global_index);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    SceneSpec spec;
    if (cfg.shared_classes || cfg.k < 3) {
        spec.class_id = int64_t(uni(rng) * double(cfg.k));
    } else {
        int64_t k_train = std::max<int64_t>(1, (cfg.k * 4) / 5);
        spec.class_id = test_split ? k_train + int64_t(uni(rng) * double(cfg.k - k_train))
                                   : int64_t(uni(rng) * double(k_train));
    }
    spec.class_id = std::min(spec.class_id, cfg.k - 1);
    spec.scale = 0.2 + 0.4 * uni(rng);
    // rotated superellipse extent <= scale/2 * sqrt(2); keep it inside bounds
    const double margin = 0.71 * spec.scale + 2.0 / double(cfg.image_size);
    spec.cx = margin + (1.0 - 2.0 * margin) * uni(rng);
    spec.cy = margin + (1.0 - 2.0 * margin) * uni(rng);
    spec.seed = mix_seed(cfg.seed ^ 0xA5A5A5A5ull, global_index);
    return spec;
}

PairedSplit generate_split(const DatasetConfig& cfg, const torch::Tensor& mixing,
                           int64_t count, uint64_t index_base, bool test_split) {
    PairedSplit split;
    split.signals = torch::empty({count, cfg.n_voxels}, torch::kFloat32);
    split.images = torch::empty({count, 3, cfg.image_size, cfg.image_size}, torch::kFloat32);
    split.masks = torch::empty({count, cfg.image_size, cfg.image_size}, torch::kUInt8);
    split.classes = torch::empty({count}, torch::kInt64);
    split.specs.resize(count);
    for (int64_t i = 0; i < count; ++i) {
        const uint64_t gi = index_base + uint64_t(i);
        auto spec = sample_spec(cfg, gi, test_split);
        auto [image, mask] = render_scene(spec, cfg.image_size, cfg.k);
        auto noise_rng = make_stream(cfg.seed ^ 0x5151ull, gi);
        split.signals[i] = signal_from_image(image, mixing, cfg.k, cfg.noise_sigma, noise_rng);
        split.images[i] = image;
        split.masks[i] = mask;
        split.classes[i] = spec.class_id;
        split.specs[i] = spec;
    }
    return split;
}

}  // namespace

torch::Tensor SynthDataset::normalize(const torch::Tensor& signals) const {
    return (signals - vox_mean) / vox_std;
}

std::set<uint64_t> SynthDataset::spec_seeds() const {
    std::set<uint64_t> seeds;
    for (const auto* split : {&train, &val, &test})
        for (const auto& s : split->specs) seeds.insert(s.seed);
    return seeds;
}

SynthDataset build_paired_dataset(const DatasetConfig& cfg) {
    if (cfg.train < 1 || cfg.val < 0 || cfg.test < 1)
        throw std::invalid_argument("build_paired_dataset: bad split counts");
    SynthDataset ds;
    ds.cfg = cfg;
    ds.mixing = make_mixing(cfg.n_voxels, descriptor_dim(cfg.k), cfg.seed);
    uint64_t base = 0;
    ds.train = generate_split(cfg, ds.mixing, cfg.train, base, false);
    base += uint64_t(cfg.train);
    ds.val = generate_split(cfg, ds.mixing, cfg.val, base, false);
    base += uint64_t(cfg.val);
    ds.test = generate_split(cfg, ds.mixing, cfg.test, base, true);
    ds.vox_mean = ds.train.signals.mean(0);
    ds.vox_std = ds.train.signals.std(0, /*unbiased=*/false).clamp_min(1e-6);
    // split hygiene
    if (ds.spec_seeds().size() != size_t(cfg.train + cfg.val + cfg.test))
        throw std::runtime_error("build_paired_dataset: spec seed collision across splits");
    return ds;
}

UnlabeledCorpus build_unlabeled_corpus(const CorpusConfig& cfg, const DatasetConfig& data_cfg,
                                       const torch::Tensor& mixing,
                                       const std::set<uint64_t>& excluded_seeds) {
    UnlabeledCorpus corpus;
    corpus.signals = torch::empty({cfg.signals, data_cfg.n_voxels}, torch::kFloat32);
    const int64_t s = data_cfg.image_size;
    corpus.images = torch::empty({cfg.images, 3, s, s}, torch::kFloat32);

    DatasetConfig gen = data_cfg;
    gen.seed = cfg.seed ^ 0xC04B05ull;
    for (int64_t i = 0; i < cfg.signals; ++i) {
        auto spec = sample_spec(gen, uint64_t(i), false);
        if (excluded_seeds.count(spec.seed))
            throw std::runtime_error("build_unlabeled_corpus: signal spec overlaps test split");
        auto [image, mask] = render_scene(spec, s, data_cfg.k);
        auto noise_rng = make_stream(gen.seed ^ 0x5151ull, uint64_t(i));
        corpus.signals[i] =
            signal_from_image(image, mixing, data_cfg.k, data_cfg.noise_sigma, noise_rng);
    }
    DatasetConfig pool = data_cfg;
    pool.seed = cfg.seed ^ 0xF001ull;
    for (int64_t j = 0; j < cfg.images; ++j) {
        auto spec = sample_spec(pool, uint64_t(j), false);
        if (excluded_seeds.count(spec.seed))
            throw std::runtime_error("build_unlabeled_corpus: image pool overlaps test split");
        corpus.images[j] = render_scene(spec, s, data_cfg.k).first;
        corpus.image_spec_seeds.push_back(spec.seed);
    }
    return corpus;
}

namespace {

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << std::setw(2) << j << "\n";
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing file: " + path.string());
    nlohmann::json j;
    in >> j;
    return j;
}

void save_split(const PairedSplit& split, const std::filesystem::path& dir,
                uint64_t mixing_checksum) {
    std::filesystem::create_directories(dir);
    save_tensor(dir / "signals.bin", split.signals);
    save_tensor(dir / "images.bin", split.images);
    save_tensor(dir / "masks.bin", split.masks);
    nlohmann::json meta;
    meta["class_ids"] = std::vector<int64_t>(
        split.classes.data_ptr<int64_t>(), split.classes.data_ptr<int64_t>() + split.size());
    auto& specs = meta["specs"] = nlohmann::json::array();
    for (const auto& s : split.specs) specs.push_back(spec_to_json(s));
    meta["mixing_checksum"] = checksum_hex(mixing_checksum);
    write_json(dir / "meta.json", meta);
}

PairedSplit load_split(const std::filesystem::path& dir, int64_t n_voxels, int64_t image_size) {
    PairedSplit split;
    split.signals = load_tensor(dir / "signals.bin");
    split.images = load_tensor(dir / "images.bin");
    split.masks = load_tensor(dir / "masks.bin");
    if (split.signals.dim() != 2 || split.signals.size(1) != n_voxels)
        throw std::runtime_error("ingest: voxel count mismatch in " +
                                 (dir / "signals.bin").string() + " (expected N=" +
                                 std::to_string(n_voxels) + ")");
    if (split.images.dim() != 4 || split.images.size(2) != image_size ||
        split.images.size(3) != image_size)
        throw std::runtime_error("ingest: bad image shape in " + (dir / "images.bin").string());
    if (split.masks.dim() != 3 || split.masks.size(1) != image_size ||
        split.masks.size(2) != image_size)
        throw std::runtime_error("ingest: mask shape mismatch in " +
                                 (dir / "masks.bin").string());
    if (split.masks.size(0) != split.images.size(0) ||
        split.signals.size(0) != split.images.size(0))
        throw std::runtime_error("ingest: sample count mismatch under " + dir.string());
    if (!split.signals.isfinite().all().item<bool>())
        throw std::runtime_error("ingest: non-finite signal values in " +
                                 (dir / "signals.bin").string());
    auto meta = read_json(dir / "meta.json");
    std::vector<int64_t> classes = meta.at("class_ids");
    if (int64_t(classes.size()) != split.signals.size(0))
        throw std::runtime_error("ingest: class_ids count mismatch in " +
                                 (dir / "meta.json").string());
    split.classes = torch::tensor(classes, torch::kInt64);
    for (const auto& s : meta.at("specs")) split.specs.push_back(spec_from_json(s));
    return split;
}

}  // namespace

void save_dataset(const SynthDataset& ds, const std::filesystem::path& root) {
    std::filesystem::create_directories(root);
    const uint64_t mix_sum = tensor_checksum(ds.mixing);
    save_tensor(root / "mixing.bin", ds.mixing);
    save_split(ds.train, root / "train", mix_sum);
    save_split(ds.val, root / "val", mix_sum);
    save_split(ds.test, root / "test", mix_sum);
    nlohmann::json manifest = ds.cfg.to_json();
    manifest["mixing_checksum"] = checksum_hex(mix_sum);
    manifest["vox_mean"] = std::vector<float>(
        ds.vox_mean.data_ptr<float>(), ds.vox_mean.data_ptr<float>() + ds.vox_mean.numel());
    manifest["vox_std"] = std::vector<float>(
        ds.vox_std.data_ptr<float>(), ds.vox_std.data_ptr<float>() + ds.vox_std.numel());
    write_json(root / "manifest.json", manifest);
}

SynthDataset ingest_dataset(const std::filesystem::path& root) {
    auto manifest = read_json(root / "manifest.json");
    SynthDataset ds;
    ds.cfg = DatasetConfig::from_json(manifest);
    ds.mixing = load_tensor(root / "mixing.bin");
    if (checksum_hex(tensor_checksum(ds.mixing)) != manifest.at("mixing_checksum"))
        throw std::runtime_error("ingest: mixing checksum mismatch in " +
                                 (root / "mixing.bin").string());
    ds.train = load_split(root / "train", ds.cfg.n_voxels, ds.cfg.image_size);
    ds.val = load_split(root / "val", ds.cfg.n_voxels, ds.cfg.image_size);
    ds.test = load_split(root / "test", ds.cfg.n_voxels, ds.cfg.image_size);
    std::vector<float> mean = manifest.at("vox_mean"), stddev = manifest.at("vox_std");
    ds.vox_mean = torch::tensor(mean, torch::kFloat32);
    ds.vox_std = torch::tensor(stddev, torch::kFloat32);
    return ds;
}

void save_corpus(const UnlabeledCorpus& corpus, const std::filesystem::path& root) {
    std::filesystem::create_directories(root);
    save_tensor(root / "signals.bin", corpus.signals);
    save_tensor(root / "images.bin", corpus.images);
    nlohmann::json meta;
    meta["image_spec_seeds"] = corpus.image_spec_seeds;
    write_json(root / "meta.json", meta);
}

UnlabeledCorpus load_corpus(const std::filesystem::path& root) {
    UnlabeledCorpus corpus;
    corpus.signals = load_tensor(root / "signals.bin");
    corpus.images = load_tensor(root / "images.bin");
    auto meta = read_json(root / "meta.json");
    corpus.image_spec_seeds = meta.at("image_spec_seeds").get<std::vector<uint64_t>>();
    return corpus;
}

}  // namespace mindiff
