#include "mindiff/metrics.hpp"
#include <random>

#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace mindiff {

torch::Tensor pcc(const torch::Tensor& x, const torch::Tensor& y) {
    auto xf = x.flatten().to(torch::kFloat64);
    auto yf = y.flatten().to(torch::kFloat64);
    if (xf.numel() != yf.numel())
        throw std::invalid_argument("pcc: length mismatch");
    if (xf.numel() < 2)
        throw std::invalid_argument("pcc: need at least 2 elements");
    auto xc = xf - xf.mean();
    auto yc = yf - yf.mean();
    double vx = xc.square().sum().item<double>();
    double vy = yc.square().sum().item<double>();
    if (vx == 0.0) throw std::invalid_argument("pcc: first input has zero variance");
    if (vy == 0.0) throw std::invalid_argument("pcc: second input has zero variance");
    return (xc * yc).sum() / std::sqrt(vx * vy);
}

torch::Tensor ssim_global(const torch::Tensor& a, const torch::Tensor& b,
                          double c1, double c2) {
    TORCH_CHECK(a.sizes() == b.sizes(), "ssim: shape mismatch");
    auto x = a.dim() == 2 ? a.unsqueeze(0) : a;
    auto y = b.dim() == 2 ? b.unsqueeze(0) : b;
    TORCH_CHECK(x.dim() == 3, "ssim: expected [C,H,W] or [H,W]");
    auto xm = x.flatten(1);  // [C, H*W]
    auto ym = y.flatten(1);
    auto mu_x = xm.mean(1);
    auto mu_y = ym.mean(1);
    auto dx = xm - mu_x.unsqueeze(1);
    auto dy = ym - mu_y.unsqueeze(1);
    auto var_x = dx.square().mean(1);
    auto var_y = dy.square().mean(1);
    auto cov = (dx * dy).mean(1);
    auto num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
    auto den = (mu_x.square() + mu_y.square() + c1) * (var_x + var_y + c2);
    return (num / den).mean();
}

torch::Tensor ssim_windowed(const torch::Tensor& a, const torch::Tensor& b,
                            int64_t window, double c1, double c2) {
    TORCH_CHECK(a.sizes() == b.sizes(), "ssim: shape mismatch");
    auto x = a.dim() == 2 ? a.unsqueeze(0) : a;
    auto y = b.dim() == 2 ? b.unsqueeze(0) : b;
    int64_t h = x.size(1), w = x.size(2);
    std::vector<torch::Tensor> vals;
    for (int64_t i = 0; i + window <= h; i += window)
        for (int64_t j = 0; j + window <= w; j += window) {
            auto xa = x.slice(1, i, i + window).slice(2, j, j + window);
            auto yb = y.slice(1, i, i + window).slice(2, j, j + window);
            vals.push_back(ssim_global(xa, yb, c1, c2));
        }
    TORCH_CHECK(!vals.empty(), "ssim_windowed: window larger than image");
    return torch::stack(vals).mean();
}

double n_way_accuracy(const torch::Tensor& scores, const torch::Tensor& classes,
                      int64_t n, int64_t trials, std::mt19937_64& rng) {
    int64_t k = scores.size(1);
    if (n < 1 || n > k)
        throw std::invalid_argument("n_way_accuracy: n must be in [1, K]");
    if (trials < 1)
        throw std::invalid_argument("n_way_accuracy: trials must be >= 1");
    auto sc = scores.to(torch::kFloat64).contiguous();
    auto cl = classes.to(torch::kInt64).contiguous();
    TORCH_CHECK(sc.size(0) == cl.size(0), "n_way_accuracy: batch mismatch");
    auto sa = sc.accessor<double, 2>();
    auto ca = cl.accessor<int64_t, 1>();
    int64_t hits = 0, total = 0;
    std::vector<int64_t> wrong(k - 1);
    for (int64_t i = 0; i < sc.size(0); ++i) {
        int64_t correct = ca[i];
        TORCH_CHECK(correct >= 0 && correct < k, "n_way_accuracy: class out of range");
        int64_t w = 0;
        for (int64_t c = 0; c < k; ++c)
            if (c != correct) wrong[w++] = c;
        for (int64_t t = 0; t < trials; ++t) {
            // partial Fisher-Yates: first n-1 entries are the distractors
            for (int64_t j = 0; j < n - 1; ++j) {
                std::uniform_int_distribution<int64_t> pick(j, k - 2);
                std::swap(wrong[j], wrong[pick(rng)]);
            }
            int64_t best = correct;
            double best_score = sa[i][correct];
            for (int64_t j = 0; j < n - 1; ++j) {
                int64_t c = wrong[j];
                if (sa[i][c] > best_score || (sa[i][c] == best_score && c < best)) {
                    best = c;
                    best_score = sa[i][c];
                }
            }
            hits += (best == correct);
            ++total;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["acc_n_way"] = acc_n_way;
    j["n"] = n;
    j["trials"] = trials;
    j["pcc"] = pcc;
    j["ssim"] = ssim;
    j["run_meta"] = run_meta;
    auto& ps = j["per_sample"] = nlohmann::json::array();
    for (const auto& r : per_sample) {
        ps.push_back({{"index", r.index},
                      {"class_id", r.class_id},
                      {"seed", r.seed},
                      {"acc", r.acc},
                      {"pcc", r.pcc},
                      {"ssim", r.ssim}});
    }
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.acc_n_way = j.at("acc_n_way");
    r.n = j.at("n");
    r.trials = j.at("trials");
    r.pcc = j.at("pcc");
    r.ssim = j.at("ssim");
    r.run_meta = j.value("run_meta", nlohmann::json::object());
    for (const auto& p : j.at("per_sample")) {
        SampleRecord s;
        s.index = p.at("index");
        s.class_id = p.at("class_id");
        s.seed = p.at("seed");
        s.acc = p.at("acc");
        s.pcc = p.at("pcc");
        s.ssim = p.at("ssim");
        r.per_sample.push_back(s);
    }
    return r;
}

void MetricsReport::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("MetricsReport: cannot write " + path);
    out << std::setw(2) << to_json() << "\n";
}

}  // namespace mindiff
