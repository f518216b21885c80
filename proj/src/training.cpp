#include "soma/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "soma/errors.hpp"
#include "soma/raster.hpp"

namespace soma {

namespace fs = std::filesystem;

namespace {

constexpr const char* kLogHeader = "step,epoch,lr,warp,cons,cert,delta,uni,total";

std::string format_record(const StepRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  static_cast<long long>(r.step), static_cast<long long>(r.epoch), r.lr, r.loss.warp,
                  r.loss.cons, r.loss.cert, r.loss.delta, r.loss.uni, r.loss.total);
    return buf;
}

void check_term(const torch::Tensor& t, const char* name) {
    if (!t.defined()) return;
    const double v = t.item<double>();
    if (!std::isfinite(v)) {
        throw NonFiniteLossError(name, std::string("non-finite loss term '") + name + "' (" +
                                           std::to_string(v) + ")");
    }
}

std::vector<torch::Tensor> model_state(SomaModel model, std::vector<std::string>* names) {
    std::vector<torch::Tensor> out;
    for (const auto& p : model->named_parameters(true)) {
        if (names) names->push_back("param." + p.key());
        out.push_back(p.value());
    }
    for (const auto& b : model->named_buffers(true)) {
        if (names) names->push_back("buffer." + b.key());
        out.push_back(b.value());
    }
    return out;
}

void write_state(torch::serialize::OutputArchive& archive, SomaModel model) {
    std::vector<std::string> names;
    auto tensors = model_state(model, &names);
    for (std::size_t i = 0; i < tensors.size(); ++i) archive.write(names[i], tensors[i]);
}

void read_state(torch::serialize::InputArchive& archive, SomaModel model, const std::string& origin) {
    torch::NoGradGuard guard;
    std::vector<std::string> names;
    auto tensors = model_state(model, &names);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        torch::Tensor stored;
        if (!archive.try_read(names[i], stored)) {
            throw LoadError(origin + ": checkpoint lacks '" + names[i] + "'");
        }
        if (stored.sizes() != tensors[i].sizes()) {
            std::ostringstream msg;
            msg << origin << ": shape mismatch for '" << names[i] << "': checkpoint " << stored.sizes()
                << ", model " << tensors[i].sizes();
            throw LoadError(msg.str());
        }
        tensors[i].copy_(stored);
    }
    auto keys = archive.keys();
    for (const auto& key : keys) {
        if ((key.rfind("param.", 0) == 0 || key.rfind("buffer.", 0) == 0) &&
            std::find(names.begin(), names.end(), key) == names.end()) {
            throw LoadError(origin + ": checkpoint entry '" + key + "' does not exist in the model");
        }
    }
}

struct CheckpointHeader {
    RunConfig config;
    int64_t step = 0;
};

CheckpointHeader read_header(torch::serialize::InputArchive& archive, const fs::path& path) {
    c10::IValue text;
    if (!archive.try_read("config", text) || !text.isString()) {
        throw LoadError(path.string() + ": not a training checkpoint (no config)");
    }
    CheckpointHeader h;
    h.config = parse_config(text.toStringRef());
    torch::Tensor hash;
    torch::Tensor step;
    if (!archive.try_read("config_hash", hash) || !archive.try_read("step", step)) {
        throw LoadError(path.string() + ": checkpoint header incomplete");
    }
    if (static_cast<uint64_t>(hash.item<int64_t>()) != config_hash(h.config)) {
        throw LoadError(path.string() + ": config hash does not match the stored config");
    }
    h.step = step.item<int64_t>();
    return h;
}

torch::serialize::InputArchive open_archive(const fs::path& path) {
    if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw LoadError("cannot read checkpoint " + path.string());
    }
    return archive;
}

std::string slug(const std::string& s) {
    std::string out;
    for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    return out;
}

} // namespace

void apply_runtime(const RunConfig& config) {
    torch::set_num_threads(static_cast<int>(std::max<int64_t>(1, config.threads)));
    at::globalContext().setDeterministicAlgorithms(config.deterministic, false);
    torch::manual_seed(config.seed);
}

torch::Tensor match_channels(const torch::Tensor& image, int64_t channels) {
    const auto c = image.size(1);
    if (c == channels) return image;
    if (channels == 1) return image.mean(1, true);
    if (c == 1) return image.expand({image.size(0), channels, image.size(2), image.size(3)}).contiguous();
    throw ValidationError("cannot convert a " + std::to_string(c) + "-channel image to " +
                          std::to_string(channels) + " channels");
}

Trainer::Trainer(RunConfig config) : config_(std::move(config)) {
    config_.validate();
    if (config_.data_root.empty()) throw ConfigError("config: data.root is not set");
    train_ = Dataset::load(config_.data_root, "train", config_.dataset_options());
    if (train_.empty()) throw LoadError("no training pairs under " + (fs::path(config_.data_root) / "train").string());
    {
        auto first = train_.get(0, 0);
        if (first.optical.size(1) != config_.height || first.optical.size(2) != config_.width) {
            throw ConfigError("config: image size " + std::to_string(config_.height) + "x" +
                              std::to_string(config_.width) + " does not match training tiles (" +
                              std::to_string(first.optical.size(1)) + "x" +
                              std::to_string(first.optical.size(2)) + ")");
        }
    }

    apply_runtime(config_);
    model_ = SomaModel(config_.model);
    model_->train();
    auto options = torch::optim::AdamWOptions(config_.lr)
                       .betas({config_.beta1, config_.beta2})
                       .eps(config_.eps)
                       .weight_decay(config_.weight_decay);
    optimizer_ = std::make_unique<torch::optim::AdamW>(model_->trainable_parameters(), options);

    if (!config_.run_dir.empty()) {
        fs::create_directories(config_.run_dir);
        save_config(fs::path(config_.run_dir) / "config.cfg", config_);
    }
}

Trainer Trainer::resume(const fs::path& checkpoint) {
    auto archive = open_archive(checkpoint);
    auto header = read_header(archive, checkpoint);
    Trainer t(header.config);
    read_state(archive, t.model_, checkpoint.string());
    torch::serialize::InputArchive optim;
    if (!archive.try_read("optimizer", optim)) throw LoadError(checkpoint.string() + ": no optimizer state");
    t.optimizer_->load(optim);
    torch::Tensor rng;
    if (archive.try_read("rng", rng)) {
        auto gen = at::detail::getDefaultCPUGenerator();
        gen.set_state(rng);
    }
    t.step_ = header.step;
    return t;
}

int64_t Trainer::steps_per_epoch() const {
    const auto n = static_cast<int64_t>(train_.size());
    return (n + config_.batch_size - 1) / config_.batch_size;
}

double Trainer::lr_at(int64_t step) const {
    const auto warm = config_.warmup_epochs * steps_per_epoch();
    if (warm <= 0 || step >= warm) return config_.lr;
    return config_.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
}

Batch Trainer::batch_at(int64_t epoch, int64_t position) const {
    auto order = train_.epoch_order(epoch);
    const auto begin = static_cast<std::size_t>(position * config_.batch_size);
    const auto end = std::min(order.size(), begin + static_cast<std::size_t>(config_.batch_size));
    if (begin >= end) throw ValidationError("batch position out of range");
    std::vector<ImagePair> pairs;
    for (auto i = begin; i < end; ++i) pairs.push_back(train_.get(order[i], epoch));
    return collate(pairs);
}

StepRecord Trainer::train_step(const Batch& batch) {
    const double lr = lr_at(step_);
    for (auto& group : optimizer_->param_groups()) {
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
    }
    model_->train();
    optimizer_->zero_grad();

    auto optical = match_channels(batch.optical, config_.model.optical_channels);
    auto result = model_->forward(optical, batch.sar, true);
    auto mask = config_.mask_padding ? batch.valid : torch::Tensor();
    auto loss = total_loss(result, batch.gt, config_.loss, mask);
    check_term(loss.warp, "warp");
    check_term(loss.cons, "cons");
    check_term(loss.cert, "cert");
    check_term(loss.delta, "delta");
    check_term(loss.uni, "uni");
    check_term(loss.total, "total");

    loss.total.backward();
    if (config_.grad_clip > 0) {
        torch::nn::utils::clip_grad_norm_(model_->trainable_parameters(), config_.grad_clip);
    }
    optimizer_->step();

    StepRecord record;
    record.epoch = step_ / steps_per_epoch();
    ++step_;
    record.step = step_;
    record.lr = lr;
    record.loss = values(loss);
    history_.push_back(record);
    log(record);
    return record;
}

void Trainer::log(const StepRecord& record) {
    if (config_.run_dir.empty()) return;
    const auto path = fs::path(config_.run_dir) / "train_log.csv";
    const bool fresh = record.step == 1 || !fs::exists(path);
    std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) out << kLogHeader << '\n';
    out << format_record(record) << '\n';
}

std::vector<StepRecord> Trainer::run(int64_t max_steps) {
    if (max_steps <= 0) max_steps = config_.max_steps;
    const auto per_epoch = steps_per_epoch();
    const auto total = config_.epochs * per_epoch;
    std::vector<StepRecord> records;
    while (step_ < total && (max_steps <= 0 || step_ < max_steps)) {
        const auto e = step_ / per_epoch;
        const auto pos = step_ % per_epoch;
        records.push_back(train_step(batch_at(e, pos)));
        const auto done = step_ / per_epoch;
        if (step_ % per_epoch == 0 && !config_.run_dir.empty() && config_.checkpoint_every > 0 &&
            done % config_.checkpoint_every == 0) {
            save_checkpoint(fs::path(config_.run_dir) / ("ckpt_epoch_" + std::to_string(done) + ".pt"));
        }
    }
    if (!config_.run_dir.empty()) save_checkpoint(fs::path(config_.run_dir) / "last.pt");
    return records;
}

void Trainer::save_checkpoint(const fs::path& path) const {
    torch::serialize::OutputArchive archive;
    archive.write("config", c10::IValue(serialize_config(config_)));
    archive.write("config_hash", torch::tensor(static_cast<int64_t>(config_hash(config_)), torch::kInt64));
    archive.write("step", torch::tensor(step_, torch::kInt64));
    archive.write("epoch", torch::tensor(epoch(), torch::kInt64));
    archive.write("rng", at::detail::getDefaultCPUGenerator().get_state());
    write_state(archive, model_);
    torch::serialize::OutputArchive optim;
    optimizer_->save(optim);
    archive.write("optimizer", optim);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    archive.save_to(path.string());
}

LoadedModel load_checkpoint(const fs::path& path) {
    auto archive = open_archive(path);
    auto header = read_header(archive, path);
    header.config.validate();
    apply_runtime(header.config);
    LoadedModel out;
    out.config = header.config;
    out.model = SomaModel(header.config.model);
    read_state(archive, out.model, path.string());
    out.model->eval();
    out.step = header.step;
    return out;
}

std::vector<EvalRecord> evaluate_model(SomaModel model, const Dataset& dataset, int64_t batch_size) {
    torch::NoGradGuard guard;
    model->eval();
    const auto channels = model->options().optical_channels;
    std::vector<EvalRecord> records;
    auto order = dataset.epoch_order(0);
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
        std::vector<ImagePair> pairs;
        for (auto i = begin; i < end; ++i) pairs.push_back(dataset.get(order[i], 0));
        auto batch = collate(pairs);
        auto result = model->forward(match_channels(batch.optical, channels), batch.sar, false);
        auto part = make_records(result.final_field, batch.gt, batch.valid, batch.ids);
        records.insert(records.end(), part.begin(), part.end());
    }
    return records;
}

std::vector<EvalRecord> evaluate_checkpoint(const fs::path& checkpoint, const std::string& split,
                                            const fs::path& out_dir, const std::string& data_root) {
    auto loaded = load_checkpoint(checkpoint);
    const auto root = data_root.empty() ? loaded.config.data_root : data_root;
    if (root.empty()) throw ConfigError("no data root in the checkpoint config or on the command line");
    const auto dir = fs::path(root) / split;
    if (split != "train" && !fs::exists(dir / "manifest.csv")) {
        throw LoadError("missing perturbation manifest " + (dir / "manifest.csv").string());
    }
    auto dataset = Dataset::load(root, split, loaded.config.dataset_options());
    if (dataset.empty()) throw LoadError("no pairs under " + dir.string());
    auto records = evaluate_model(loaded.model, dataset, loaded.config.batch_size);
    if (!out_dir.empty()) write_report(out_dir, {{loaded.config.name, records}});
    return records;
}

RegistrationOutput register_pair(SomaModel model, const fs::path& optical_path, const fs::path& sar_path,
                                 const fs::path& out_dir) {
    torch::NoGradGuard guard;
    model->eval();
    auto optical = read_raster(optical_path);
    auto sar = read_raster(sar_path);
    if (sar.size(0) != 1) sar = sar.mean(0, true);
    const auto h = optical.size(1);
    const auto w = optical.size(2);
    if (sar.size(1) != h || sar.size(2) != w) {
        throw ValidationError("register: optical " + std::to_string(h) + "x" + std::to_string(w) +
                              " and SAR " + std::to_string(sar.size(1)) + "x" + std::to_string(sar.size(2)) +
                              " sizes differ");
    }
    const auto ph = (h + 15) / 16 * 16;
    const auto pw = (w + 15) / 16 * 16;
    auto pad = [&](const torch::Tensor& t) {
        return torch::constant_pad_nd(t.unsqueeze(0), {0, pw - w, 0, ph - h}, 0.0);
    };
    const auto dtype = model->trainable_parameters().front().scalar_type();
    auto o = match_channels(pad(optical), model->options().optical_channels).to(dtype);
    auto s = pad(sar).to(dtype);
    auto result = model->forward(o, s, false);
    DisplacementField field{result.final_field.data.narrow(1, 0, h).narrow(2, 0, w).contiguous(), 1};

    fs::create_directories(out_dir);
    RegistrationOutput out;
    out.height = h;
    out.width = w;
    out.field_path = out_dir / "field.bin";
    out.raster_path = out_dir / "warped_sar.tiff";
    out.preview_path = out_dir / "warped_sar.png";
    save_field(out.field_path, field);
    auto warped = warp(sar.unsqueeze(0).to(dtype), field, Padding::Zeros)[0];
    write_raster(out.raster_path, warped);
    write_raster(out.preview_path, warped);
    out.mean_displacement = field.data.norm(2, 3).mean().item<double>();
    return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, int64_t steps, const std::string& split,
                                      const fs::path& out_dir) {
    std::vector<AblationRow> rows;
    std::vector<MethodResult> methods;
    for (const auto& name : ablation_names()) {
        auto config = apply_ablation(base, name);
        config.max_steps = steps;
        config.run_dir = out_dir.empty() ? std::string() : (out_dir / slug(name)).string();
        Trainer trainer(config);
        auto records = trainer.run(steps);
        AblationRow row;
        row.name = name;
        row.label = ablation_label(name);
        row.signature = trainer.model()->signature();
        if (!records.empty()) row.last_loss = records.back().loss;
        if (!split.empty()) {
            auto dataset = Dataset::load(config.data_root, split, config.dataset_options());
            row.records = evaluate_model(trainer.model(), dataset, config.batch_size);
            methods.push_back({row.label, row.records});
        }
        rows.push_back(row);
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream out(out_dir / "ablation.csv");
        out << "name,setup,trainable_params,frozen_params,last_total_loss\n";
        for (const auto& r : rows) {
            out << r.name << ",\"" << r.label << "\"," << r.signature.trainable << ',' << r.signature.frozen
                << ',' << r.last_loss.total << '\n';
        }
        if (!methods.empty()) write_report(out_dir, methods);
    }
    return rows;
}

} // namespace soma
