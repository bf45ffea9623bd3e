#include "mindiff/embedder.hpp"

namespace mindiff {

ImageClassifierImpl::ImageClassifierImpl(int64_t num_classes, int64_t feat_dim)
    : num_classes_(num_classes), feat_dim_(feat_dim) {
    using namespace torch::nn;
    trunk = Sequential(
        Conv2d(Conv2dOptions(3, 16, 3).stride(2).padding(1)), ReLU(),
        Conv2d(Conv2dOptions(16, 32, 3).stride(2).padding(1)), ReLU(),
        Conv2d(Conv2dOptions(32, 64, 3).stride(2).padding(1)), ReLU(),
        AdaptiveAvgPool2d(AdaptiveAvgPool2dOptions(1)), Flatten());
    feat = Linear(64, feat_dim);
    head = Linear(feat_dim, num_classes);
    register_module("trunk", trunk);
    register_module("feat", feat);
    register_module("head", head);
}

torch::Tensor ImageClassifierImpl::features(const torch::Tensor& images) {
    return torch::relu(feat(trunk->forward(images)));
}

torch::Tensor ImageClassifierImpl::forward(const torch::Tensor& images) {
    return head(features(images));
}

double train_classifier(ImageClassifier& model, const torch::Tensor& images,
                        const torch::Tensor& classes, int64_t epochs, double lr,
                        int64_t batch_size, uint64_t seed) {
    torch::manual_seed(seed);
    model->train();
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(lr));
    const int64_t n = images.size(0);
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        auto perm = torch::randperm(n, torch::kInt64);
        for (int64_t start = 0; start < n; start += batch_size) {
            auto idx = perm.slice(0, start, std::min(start + batch_size, n));
            auto logits = model->forward(images.index_select(0, idx));
            auto loss = torch::cross_entropy_loss(logits, classes.index_select(0, idx));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    model->eval();
    torch::NoGradGuard ng;
    auto pred = model->forward(images).argmax(1);
    return pred.eq(classes).to(torch::kFloat64).mean().item<double>();
}

}  // namespace mindiff
