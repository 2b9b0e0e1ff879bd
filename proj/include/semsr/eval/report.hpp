#pragma once

#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "semsr/eval/metrics.hpp"

namespace semsr::eval {

// Extension point for learned or distributional quality metrics. Nothing is
// registered by default.
struct MetricPlugin {
    enum class Kind { per_image, distributional };
    std::string name;
    Kind kind = Kind::per_image;
    bool higher_is_better = true;
    // per_image: (output, reference or nullptr) -> score
    std::function<double(const ImageTensor&, const ImageTensor*)> per_image;
    // distributional: (outputs, references) -> score
    std::function<double(const std::vector<ImageTensor>&, const std::vector<ImageTensor>&)> distributional;
};

class MetricRegistry {
public:
    void add(MetricPlugin plugin) {
        if (plugin.name.empty()) throw ArgumentError("metric plugin needs a name");
        if (plugin.kind == MetricPlugin::Kind::per_image ? !plugin.per_image : !plugin.distributional)
            throw ArgumentError("metric plugin '" + plugin.name + "' has no callable for its kind");
        for (const auto& p : plugins_)
            if (p.name == plugin.name) throw ArgumentError("metric plugin '" + plugin.name + "' already registered");
        plugins_.push_back(std::move(plugin));
    }
    const std::vector<MetricPlugin>& plugins() const { return plugins_; }

private:
    std::vector<MetricPlugin> plugins_;
};

struct ImageMetrics {
    std::string id;
    double psnr = 0;
    double ssim = 0;
    std::map<std::string, double> extra;
};

struct MetricsReport {
    std::string name;
    std::vector<ImageMetrics> images;
    double psnr_mean = 0;
    double ssim_mean = 0;
    std::optional<double> op, or_, ap;
    std::map<std::string, double> extra_means;
    std::map<std::string, double> distributional;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<std::string> warnings;

    std::size_t image_count() const { return images.size(); }

    // Recomputes aggregates from per-image entries.
    void aggregate() {
        psnr_mean = ssim_mean = 0;
        extra_means.clear();
        if (images.empty()) return;
        std::map<std::string, int> counts;
        for (const auto& im : images) {
            psnr_mean += im.psnr;
            ssim_mean += im.ssim;
            for (const auto& [k, v] : im.extra) {
                extra_means[k] += v;
                ++counts[k];
            }
        }
        psnr_mean /= static_cast<double>(images.size());
        ssim_mean /= static_cast<double>(images.size());
        for (auto& [k, v] : extra_means) v /= counts[k];
    }
};

inline nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["name"] = r.name;
    j["image_count"] = r.images.size();
    j["psnr_y"] = r.psnr_mean;
    j["ssim_y"] = r.ssim_mean;
    j["op"] = optional_json(r.op);
    j["or"] = optional_json(r.or_);
    j["ap"] = optional_json(r.ap);
    j["extra"] = r.extra_means;
    j["distributional"] = r.distributional;
    j["metadata"] = r.metadata;
    j["warnings"] = r.warnings;
    auto& per = j["per_image"] = nlohmann::json::array();
    for (const auto& im : r.images) per.push_back({{"id", im.id}, {"psnr_y", im.psnr}, {"ssim_y", im.ssim}, {"extra", im.extra}});
    return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.name = j.at("name").get<std::string>();
    auto opt = [&](const char* k) -> std::optional<double> {
        return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>());
    };
    r.op = opt("op");
    r.or_ = opt("or");
    r.ap = opt("ap");
    r.metadata = j.at("metadata");
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.distributional = j.at("distributional").get<std::map<std::string, double>>();
    for (const auto& e : j.at("per_image"))
        r.images.push_back({e.at("id").get<std::string>(), e.at("psnr_y").get<double>(), e.at("ssim_y").get<double>(),
                            e.at("extra").get<std::map<std::string, double>>()});
    r.aggregate();
    return r;
}

// Evaluates fidelity metrics (Y channel) and any registered plugins.
inline MetricsReport evaluate_images(const std::string& name, const std::vector<std::string>& ids,
                                     const std::vector<ImageTensor>& outputs, const std::vector<ImageTensor>& references,
                                     const MetricRegistry* plugins = nullptr) {
    if (outputs.size() != references.size() || outputs.size() != ids.size())
        throw ArgumentError("evaluate_images: outputs, references and ids differ in length");
    MetricsReport r;
    r.name = name;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        ImageMetrics m{ids[i], psnr(outputs[i], references[i], true), ssim(outputs[i], references[i], true), {}};
        if (plugins)
            for (const auto& p : plugins->plugins())
                if (p.kind == MetricPlugin::Kind::per_image) m.extra[p.name] = p.per_image(outputs[i], &references[i]);
        r.images.push_back(std::move(m));
    }
    if (plugins)
        for (const auto& p : plugins->plugins())
            if (p.kind == MetricPlugin::Kind::distributional) r.distributional[p.name] = p.distributional(outputs, references);
    r.aggregate();
    return r;
}

// Adds OP/OR/AP from predicted tag sets, per-class probabilities and truths.
inline void attach_tagging(MetricsReport& r, const std::vector<TagSet>& predicted,
                           const std::vector<std::vector<double>>& probabilities, const std::vector<TagSet>& truths,
                           const TagVocabulary& vocab) {
    auto oo = compute_op_or(predicted, truths, vocab);
    r.op = oo.op;
    r.or_ = oo.or_;
    for (auto& w : oo.warnings) r.warnings.push_back(std::move(w));
    std::vector<std::vector<bool>> masks;
    for (const auto& t : truths) masks.push_back(tag_mask(t, vocab));
    r.ap = probabilities.empty() ? std::nullopt : average_precision(probabilities, masks);
    if (!r.ap) r.warnings.push_back("AP undefined: no class has a positive");
    r.metadata["ap_convention"] = "all-points interpolated precision envelope, mean over classes with positives";
}

// Rows are metrics, columns are report names.
inline std::vector<std::pair<std::string, std::vector<std::string>>> table_rows(const std::vector<MetricsReport>& reports) {
    auto fmt = [](const std::optional<double>& v, int prec) {
        if (!v) return std::string("null");
        std::ostringstream os;
        os << std::fixed << std::setprecision(prec) << *v;
        return os.str();
    };
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    auto row = [&](const std::string& label, auto getter, int prec) {
        std::vector<std::string> cells;
        for (const auto& r : reports) cells.push_back(fmt(getter(r), prec));
        rows.emplace_back(label, std::move(cells));
    };
    row("PSNR(Y)", [](const MetricsReport& r) { return std::optional<double>(r.psnr_mean); }, 4);
    row("SSIM(Y)", [](const MetricsReport& r) { return std::optional<double>(r.ssim_mean); }, 4);
    row("OP", [](const MetricsReport& r) { return r.op; }, 4);
    row("OR", [](const MetricsReport& r) { return r.or_; }, 4);
    row("AP", [](const MetricsReport& r) { return r.ap; }, 4);
    std::map<std::string, bool> extra;
    for (const auto& r : reports)
        for (const auto& [k, v] : r.extra_means) extra[k] = true;
    for (const auto& [k, unused] : extra)
        row(k, [k = k](const MetricsReport& r) {
            auto it = r.extra_means.find(k);
            return it == r.extra_means.end() ? std::nullopt : std::optional<double>(it->second);
        }, 4);
    return rows;
}

inline std::string to_csv(const std::vector<MetricsReport>& reports) {
    std::ostringstream os;
    os << "metric";
    for (const auto& r : reports) os << ',' << r.name;
    os << '\n';
    for (const auto& [label, cells] : table_rows(reports)) {
        os << label;
        for (const auto& c : cells) os << ',' << c;
        os << '\n';
    }
    return os.str();
}

inline std::string to_text_table(const std::vector<MetricsReport>& reports) {
    const auto rows = table_rows(reports);
    std::size_t label_w = 6;
    for (const auto& [label, cells] : rows) label_w = std::max(label_w, label.size());
    std::vector<std::size_t> col_w;
    for (const auto& r : reports) col_w.push_back(std::max<std::size_t>(r.name.size(), 8));
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(label_w)) << "metric";
    for (std::size_t i = 0; i < reports.size(); ++i)
        os << "  " << std::right << std::setw(static_cast<int>(col_w[i])) << reports[i].name;
    os << '\n';
    for (const auto& [label, cells] : rows) {
        os << std::left << std::setw(static_cast<int>(label_w)) << label;
        for (std::size_t i = 0; i < cells.size(); ++i)
            os << "  " << std::right << std::setw(static_cast<int>(col_w[i])) << cells[i];
        os << '\n';
    }
    return os.str();
}

}  // namespace semsr::eval
