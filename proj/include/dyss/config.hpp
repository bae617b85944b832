#pragma once

#include <string>

#include "dyss/decoder.hpp"
#include "dyss/io.hpp"
#include "dyss/simworld.hpp"

namespace dyss {

struct TrainConfig {
    std::size_t steps = 500;
    std::size_t batch = 4;
    double lr = 2e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t checkpoint_every = 100;
    bool deterministic = false;
};

struct RunConfig {
    std::uint64_t seed = 1;
    WorldConfig world;
    DecoderConfig decoder;
    LossConfig loss;
    TrainConfig train;
};

namespace detail {

inline void reject_unknown(const json& j, const std::vector<std::string>& known,
                           const std::string& context) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw std::runtime_error(context + ": unknown key '" + it.key() + "'");
}

inline json decoder_to_json(const DecoderConfig& d) {
    return json{{"layers", d.layers},
                {"queries", d.queries},
                {"floor", d.floor_count},
                {"feature_dim", d.feature_dim},
                {"points", d.points},
                {"state_dim", d.state_dim},
                {"attn_heads", d.attn_heads},
                {"num_classes", d.num_classes},
                {"transform", d.use_identity && d.use_fft
                                  ? "both"
                                  : (d.use_fft ? "fft" : "identity")},
                {"dynamic", d.dynamic},
                {"mask_ratio", d.mask_ratio},
                {"mask_every_layer", d.mask_every_layer},
                {"mix_source", d.mix_source == MixSource::state ? "state" : "enhanced"},
                {"init_xy_sigma", d.init.xy_sigma},
                {"init_size_mean", d.init.size_mean},
                {"init_size_sigma", d.init.size_sigma},
                {"init_theta_sigma", d.init.theta_sigma}};
}

inline DecoderConfig decoder_from_json(const json& j) {
    reject_unknown(j, {"layers", "queries", "floor", "feature_dim", "points", "state_dim",
                       "attn_heads", "num_classes", "transform", "dynamic", "mask_ratio",
                       "mask_every_layer", "mix_source", "init_xy_sigma", "init_size_mean",
                       "init_size_sigma", "init_theta_sigma"},
                   "decoder config");
    DecoderConfig d;
    d.layers = require_field(j, "layers", "decoder").get<std::size_t>();
    d.queries = require_field(j, "queries", "decoder").get<std::size_t>();
    d.floor_count = require_field(j, "floor", "decoder").get<std::size_t>();
    d.feature_dim = require_field(j, "feature_dim", "decoder").get<std::size_t>();
    d.points = require_field(j, "points", "decoder").get<std::size_t>();
    d.state_dim = require_field(j, "state_dim", "decoder").get<std::size_t>();
    d.attn_heads = require_field(j, "attn_heads", "decoder").get<std::size_t>();
    d.num_classes = require_field(j, "num_classes", "decoder").get<std::size_t>();
    const std::string tf = require_field(j, "transform", "decoder").get<std::string>();
    if (tf == "both") {
        d.use_identity = d.use_fft = true;
    } else if (tf == "identity") {
        d.use_identity = true;
        d.use_fft = false;
    } else if (tf == "fft") {
        d.use_identity = false;
        d.use_fft = true;
    } else {
        throw std::runtime_error("decoder config: transform must be identity|fft|both, got '" +
                                 tf + "'");
    }
    d.dynamic = require_field(j, "dynamic", "decoder").get<bool>();
    d.mask_ratio = require_field(j, "mask_ratio", "decoder").get<double>();
    d.mask_every_layer = require_field(j, "mask_every_layer", "decoder").get<bool>();
    const std::string mix = require_field(j, "mix_source", "decoder").get<std::string>();
    if (mix == "state")
        d.mix_source = MixSource::state;
    else if (mix == "enhanced")
        d.mix_source = MixSource::enhanced;
    else
        throw std::runtime_error("decoder config: mix_source must be state|enhanced");
    d.init.xy_sigma = require_field(j, "init_xy_sigma", "decoder").get<double>();
    d.init.size_mean = require_field(j, "init_size_mean", "decoder").get<double>();
    d.init.size_sigma = require_field(j, "init_size_sigma", "decoder").get<double>();
    d.init.theta_sigma = require_field(j, "init_theta_sigma", "decoder").get<double>();
    d.validate();
    return d;
}

inline json loss_to_json(const LossConfig& l) {
    return json{{"lambda_box", l.lambda_box},   {"lambda_rec", l.lambda_rec},
                {"lambda_future", l.lambda_future}, {"focal_gamma", l.focal_gamma},
                {"focal_alpha", l.focal_alpha}, {"match_alpha", l.match_alpha},
                {"match_beta", l.match_beta}};
}

inline LossConfig loss_from_json(const json& j) {
    reject_unknown(j, {"lambda_box", "lambda_rec", "lambda_future", "focal_gamma", "focal_alpha",
                       "match_alpha", "match_beta"},
                   "loss config");
    LossConfig l;
    l.lambda_box = require_field(j, "lambda_box", "loss").get<double>();
    l.lambda_rec = require_field(j, "lambda_rec", "loss").get<double>();
    l.lambda_future = require_field(j, "lambda_future", "loss").get<double>();
    l.focal_gamma = require_field(j, "focal_gamma", "loss").get<double>();
    l.focal_alpha = require_field(j, "focal_alpha", "loss").get<double>();
    l.match_alpha = require_field(j, "match_alpha", "loss").get<double>();
    l.match_beta = require_field(j, "match_beta", "loss").get<double>();
    return l;
}

inline json train_to_json(const TrainConfig& t) {
    return json{{"steps", t.steps},
                {"batch", t.batch},
                {"lr", t.lr},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_eps", t.adam_eps},
                {"checkpoint_every", t.checkpoint_every},
                {"deterministic", t.deterministic}};
}

inline TrainConfig train_from_json(const json& j) {
    reject_unknown(j, {"steps", "batch", "lr", "adam_beta1", "adam_beta2", "adam_eps",
                       "checkpoint_every", "deterministic"},
                   "train config");
    TrainConfig t;
    t.steps = require_field(j, "steps", "train").get<std::size_t>();
    t.batch = require_field(j, "batch", "train").get<std::size_t>();
    t.lr = require_field(j, "lr", "train").get<double>();
    t.adam_beta1 = require_field(j, "adam_beta1", "train").get<double>();
    t.adam_beta2 = require_field(j, "adam_beta2", "train").get<double>();
    t.adam_eps = require_field(j, "adam_eps", "train").get<double>();
    t.checkpoint_every = require_field(j, "checkpoint_every", "train").get<std::size_t>();
    t.deterministic = require_field(j, "deterministic", "train").get<bool>();
    return t;
}

}  // namespace detail

inline json run_config_to_json(const RunConfig& c) {
    return json{{"seed", c.seed},
                {"world", detail::world_to_json(c.world)},
                {"decoder", detail::decoder_to_json(c.decoder)},
                {"loss", detail::loss_to_json(c.loss)},
                {"train", detail::train_to_json(c.train)}};
}

inline RunConfig run_config_from_json(const json& j) {
    detail::reject_unknown(j, {"seed", "world", "decoder", "loss", "train"}, "run config");
    RunConfig c;
    c.seed = require_field(j, "seed", "run config").get<std::uint64_t>();
    c.world = detail::world_from_json(require_field(j, "world", "run config"));
    c.decoder = detail::decoder_from_json(require_field(j, "decoder", "run config"));
    c.loss = detail::loss_from_json(require_field(j, "loss", "run config"));
    c.train = detail::train_from_json(require_field(j, "train", "run config"));
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    return run_config_from_json(read_json_file(path));
}

inline void save_run_config(const std::string& path, const RunConfig& c) {
    write_json_file(path, run_config_to_json(c));
}

}  // namespace dyss
