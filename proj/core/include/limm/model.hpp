#pragma once

// Full model assembly: windowed backbone, optional GSA supplement, the two
// counting heads, the contrastive projector pair, and checkpoint I/O.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "limm/backbone.hpp"
#include "limm/contrastive.hpp"
#include "limm/heads.hpp"

namespace limm {

struct ModelConfig {
    BackboneConfig backbone;
    bool gsaEnabled = true;
    int gsaHeads = 8;
    bool contrastiveEnabled = true;
    int projDim = 64;

    void validate() const {
        backbone.validate();
        if (gsaEnabled && backbone.dims[3] % gsaHeads != 0)
            throw InvalidArgument("ModelConfig: stage-4 dims must be divisible by gsaHeads");
        if (contrastiveEnabled && projDim < 1) throw InvalidArgument("ModelConfig: projDim must be positive");
    }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"depths", c.backbone.depths},
                          {"dims", c.backbone.dims},
                          {"ws", c.backbone.ws},
                          {"shift", c.backbone.shiftEnabled},
                          {"dw_kernel", c.backbone.dwKernel},
                          {"gsa", c.gsaEnabled},
                          {"gsa_heads", c.gsaHeads},
                          {"contrastive", c.contrastiveEnabled},
                          {"proj_dim", c.projDim}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.backbone.depths = j.at("depths").get<std::vector<int>>();
    c.backbone.dims = j.at("dims").get<std::vector<int>>();
    c.backbone.ws = j.at("ws").get<int>();
    c.backbone.shiftEnabled = j.at("shift").get<bool>();
    c.backbone.dwKernel = j.at("dw_kernel").get<int>();
    c.gsaEnabled = j.at("gsa").get<bool>();
    c.gsaHeads = j.at("gsa_heads").get<int>();
    c.contrastiveEnabled = j.at("contrastive").get<bool>();
    c.projDim = j.at("proj_dim").get<int>();
    return c;
}

template <class T>
class LimmModel {
  public:
    struct TrainForward {
        DensityMap<T> fine;    // head-1 output over GSA-concat features
        DensityMap<T> global;  // head-2 output; values == nullptr when GSA is off
        Tensor<T> stage3;      // per-window contrastive features, [nWin,C3,h3,h3]
        Tensor<T> stage4;      // pre-GSA per-window features, [nWin,C4,h,h]
        WindowGrid<T> meta;    // pixel-space window layout (windows nulled)
    };

    LimmModel(const ModelConfig& cfg, std::uint64_t initSeed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(initSeed);
        backbone_ = std::make_unique<Backbone<T>>(cfg_.backbone, reg_, rng);
        const int c4 = cfg_.backbone.dims[3];
        if (cfg_.gsaEnabled) {
            GsaConfig gc;
            gc.heads = cfg_.gsaHeads;
            gc.dModel = c4;
            gsa_ = std::make_unique<GsaLayer<T>>(gc, reg_, rng);
            head2_ = std::make_unique<CountingHead<T>>("head2", c4, reg_, rng);
        }
        const int cf = cfg_.gsaEnabled ? 2 * c4 : c4;
        head1_ = std::make_unique<CountingHead<T>>("head1", cf, reg_, rng);
        if (cfg_.contrastiveEnabled)
            proj_ = std::make_unique<ProjectionPair<T>>(
                ProjectionPair<T>::create(cfg_.backbone.dims[2], cfg_.projDim, reg_, rng));
    }

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry<T>& params() { return reg_; }
    const ParamRegistry<T>& params() const { return reg_; }
    GsaLayer<T>* gsa() { return gsa_.get(); }
    ProjectionPair<T>* projector() { return proj_.get(); }

    TrainForward forward(Graph<T>* g, const Tensor<T>& image) {
        auto taps = backbone_->forward(g, image);
        TrainForward out;
        out.stage3 = taps.stage3;
        out.stage4 = taps.stage4;
        out.meta = taps.meta;
        Tensor<T> h1in = taps.stage4;
        if (cfg_.gsaEnabled) {
            auto mixed = gsa_->forward(g, taps.stage4, taps.meta.rows, taps.meta.cols);
            h1in = ops::concat<T>(g, {taps.stage4, mixed}, 1);
            out.global = density_from_tiles(g, head2_->forward(g, mixed), taps.meta);
        }
        out.fine = density_from_tiles(g, head1_->forward(g, h1in), taps.meta);
        return out;
    }

    /// Inference path: backbone + GSA + head-1 only.
    DensityMap<T> predict(const Tensor<T>& image) { return forward(nullptr, image).fine; }

    double predict_count(const Tensor<T>& image) { return predict(image).total(); }

    /// Unit query/key embedding for one stage-3 window tile [C3,h,h].
    Tensor<T> embed_query(Graph<T>* g, const Tensor<T>& tile) {
        require_projector();
        return project(g, tile, proj_->query);
    }
    Tensor<T> embed_key(const Tensor<T>& tile) {
        require_projector();
        return project<T>(nullptr, tile, proj_->key);
    }

    void save(const std::string& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(fs::path(dir) / "params");
        nlohmann::json manifest;
        manifest["format"] = "limm-checkpoint-v1";
        manifest["model"] = model_config_to_json(cfg_);
        auto& plist = manifest["params"] = nlohmann::json::array();
        int idx = 0;
        for (const auto& [name, t] : reg_.items()) {
            const std::string rel = "params/" + std::to_string(idx++) + ".tnsr";
            save_tnsr((fs::path(dir) / rel).string(), t);
            plist.push_back({{"name", name}, {"file", rel}});
        }
        std::ofstream os(fs::path(dir) / "manifest.json");
        if (!os) throw IoError("cannot write checkpoint manifest in " + dir);
        os << manifest.dump(2) << "\n";
    }

    static LimmModel load(const std::string& dir) {
        namespace fs = std::filesystem;
        std::ifstream is(fs::path(dir) / "manifest.json");
        if (!is) throw IoError("missing checkpoint manifest in " + dir);
        nlohmann::json manifest;
        try {
            is >> manifest;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad checkpoint manifest: ") + e.what());
        }
        if (manifest.value("format", "") != "limm-checkpoint-v1")
            throw ParseError("unsupported checkpoint format");
        LimmModel model(model_config_from_json(manifest.at("model")), 0);
        for (const auto& entry : manifest.at("params")) {
            const std::string name = entry.at("name").get<std::string>();
            auto t = model.reg_.find(name);
            if (!t) throw ParseError("checkpoint has unknown parameter: " + name);
            auto loaded = load_tnsr<T>((fs::path(dir) / entry.at("file").get<std::string>()).string());
            if (loaded->shape != t->shape) throw ParseError("checkpoint shape mismatch for " + name);
            t->data = std::move(loaded->data);
        }
        return model;
    }

  private:
    void require_projector() const {
        if (!proj_) throw InvalidState("contrastive branch is disabled in this model");
    }

    ModelConfig cfg_;
    ParamRegistry<T> reg_;
    std::unique_ptr<Backbone<T>> backbone_;
    std::unique_ptr<GsaLayer<T>> gsa_;
    std::unique_ptr<CountingHead<T>> head1_, head2_;
    std::unique_ptr<ProjectionPair<T>> proj_;
};

}  // namespace limm
