#ifndef MINDIFF_EMBEDDER_HPP
#define MINDIFF_EMBEDDER_HPP

#include <torch/torch.h>

namespace mindiff {

// Small convolutional classifier over the K synthetic classes. Its penultimate
// activation is the frozen image-embedding target of the alignment loss, and
// its logits back the n-way accuracy metric.
class ImageClassifierImpl : public torch::nn::Module {
public:
    ImageClassifierImpl(int64_t num_classes, int64_t feat_dim = 64);

    torch::Tensor features(const torch::Tensor& images);  // [B, feat_dim]
    torch::Tensor forward(const torch::Tensor& images);   // [B, num_classes] logits

    int64_t feat_dim() const { return feat_dim_; }
    int64_t num_classes() const { return num_classes_; }

private:
    int64_t num_classes_;
    int64_t feat_dim_;
    torch::nn::Sequential trunk{nullptr};
    torch::nn::Linear feat{nullptr};
    torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ImageClassifier);

// Cross-entropy training on [n,3,S,S] images / [n] labels. Returns final
// train accuracy.
double train_classifier(ImageClassifier& model, const torch::Tensor& images,
                        const torch::Tensor& classes, int64_t epochs, double lr,
                        int64_t batch_size, uint64_t seed);

}  // namespace mindiff

#endif
