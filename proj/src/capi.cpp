#include "c2l.h"

#include <cstring>
#include <new>
#include <string>

#include "c2l/checkpoint.hpp"
#include "c2l/data.hpp"
#include "c2l/error.hpp"
#include "c2l/pipeline.hpp"
#include "c2l/sampler.hpp"

struct c2l_context {
  std::string error;
  std::string result;
  c2l_log_fn log = nullptr;
  void* log_user = nullptr;
};

struct c2l_dataset {
  c2l::SlideDataset ds;
};

struct c2l_model {
  c2l::LoadedModel model;
};

namespace {

c2l_status status_of(c2l::ErrorKind k) {
  switch (k) {
    case c2l::ErrorKind::Config: return C2L_ERR_CONFIG;
    case c2l::ErrorKind::Dimension: return C2L_ERR_DIMENSION;
    case c2l::ErrorKind::Contract: return C2L_ERR_CONTRACT;
    case c2l::ErrorKind::Integrity: return C2L_ERR_INTEGRITY;
    case c2l::ErrorKind::MissingArtifact: return C2L_ERR_MISSING_ARTIFACT;
    case c2l::ErrorKind::Numeric: return C2L_ERR_NUMERIC;
    case c2l::ErrorKind::Io: return C2L_ERR_IO;
  }
  return C2L_ERR_INTERNAL;
}

template <typename F>
c2l_status guarded(c2l_context* ctx, F&& f) {
  if (ctx == nullptr) return C2L_ERR_NULL_ARGUMENT;
  ctx->error.clear();
  try {
    f();
    return C2L_OK;
  } catch (const c2l::Error& e) {
    ctx->error = e.what();
    return status_of(e.kind());
  } catch (const c2l::io::json::exception& e) {
    ctx->error = std::string("malformed JSON: ") + e.what();
    return C2L_ERR_CONFIG;
  } catch (const std::filesystem::filesystem_error& e) {
    ctx->error = e.what();
    return C2L_ERR_IO;
  } catch (const std::bad_alloc&) {
    ctx->error = "out of memory";
    return C2L_ERR_INTERNAL;
  } catch (const std::exception& e) {
    ctx->error = e.what();
    return C2L_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (p == nullptr) c2l::fail(c2l::ErrorKind::Config, std::string(what) + " must not be NULL");
}

}  // namespace

extern "C" {

const char* c2l_version(void) { return "0.1.0"; }

const char* c2l_status_name(c2l_status s) {
  switch (s) {
    case C2L_OK: return "ok";
    case C2L_ERR_CONFIG: return "config";
    case C2L_ERR_DIMENSION: return "dimension";
    case C2L_ERR_CONTRACT: return "contract";
    case C2L_ERR_INTEGRITY: return "integrity";
    case C2L_ERR_MISSING_ARTIFACT: return "missing_artifact";
    case C2L_ERR_NUMERIC: return "numeric";
    case C2L_ERR_IO: return "io";
    case C2L_ERR_INTERNAL: return "internal";
    case C2L_ERR_NULL_ARGUMENT: return "null_argument";
  }
  return "unknown";
}

c2l_status c2l_context_create(c2l_context** out) {
  if (out == nullptr) return C2L_ERR_NULL_ARGUMENT;
  *out = new (std::nothrow) c2l_context();
  return *out != nullptr ? C2L_OK : C2L_ERR_INTERNAL;
}

void c2l_context_destroy(c2l_context* ctx) { delete ctx; }

void c2l_context_set_log(c2l_context* ctx, c2l_log_fn fn, void* user) {
  if (ctx == nullptr) return;
  ctx->log = fn;
  ctx->log_user = user;
}

const char* c2l_last_error(const c2l_context* ctx) { return ctx != nullptr ? ctx->error.c_str() : ""; }

const char* c2l_result(const c2l_context* ctx) { return ctx != nullptr ? ctx->result.c_str() : ""; }

c2l_status c2l_commands(c2l_context* ctx) {
  return guarded(ctx, [&] { ctx->result = c2l::io::json(c2l::pipeline::commands()).dump(); });
}

c2l_status c2l_default_config(c2l_context* ctx, const char* command) {
  return guarded(ctx, [&] {
    need(command, "command");
    ctx->result = c2l::pipeline::default_config(command).dump(2);
  });
}

c2l_status c2l_run(c2l_context* ctx, const char* command, const char* config_json) {
  return guarded(ctx, [&] {
    need(command, "command");
    const auto cfg = config_json != nullptr && *config_json != '\0' ? c2l::io::json::parse(config_json)
                                                                    : c2l::io::json::object();
    c2l::pipeline::Logger log;
    if (ctx->log != nullptr) log = [ctx](const std::string& line) { ctx->log(line.c_str(), ctx->log_user); };
    ctx->result = c2l::pipeline::run(command, cfg, log).dump(2);
  });
}

c2l_status c2l_output_root(c2l_context* ctx) {
  return guarded(ctx, [&] { ctx->result = c2l::pipeline::output_root().string(); });
}

c2l_status c2l_dataset_open(c2l_context* ctx, const char* stem, c2l_dataset** out) {
  return guarded(ctx, [&] {
    need(stem, "stem");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<c2l_dataset>();
    h->ds = c2l::read_dataset(stem);
    *out = h.release();
  });
}

void c2l_dataset_close(c2l_dataset* ds) { delete ds; }

size_t c2l_dataset_size(const c2l_dataset* ds) { return ds != nullptr ? ds->ds.size() : 0; }

size_t c2l_dataset_gene_dim(const c2l_dataset* ds) { return ds != nullptr ? ds->ds.gene_dim() : 0; }

size_t c2l_dataset_patch_numel(const c2l_dataset* ds) { return ds != nullptr ? ds->ds.patch_numel() : 0; }

c2l_status c2l_dataset_info(c2l_context* ctx, const c2l_dataset* ds) {
  return guarded(ctx, [&] {
    need(ds, "dataset");
    const auto& d = ds->ds;
    c2l::io::json j = {{"slide_id", d.slide_id},
                       {"size", d.size()},
                       {"patch_shape", d.patch_shape},
                       {"gene_names", d.gene_names},
                       {"genes_kind", c2l::to_string(d.genes_kind)},
                       {"source", d.source},
                       {"meta", d.meta}};
    if (!d.stats.empty()) j["stats"] = d.stats.to_json();
    ctx->result = j.dump(2);
  });
}

c2l_status c2l_dataset_record(c2l_context* ctx, const c2l_dataset* ds, size_t i, float* patch, float* genes) {
  return guarded(ctx, [&] {
    need(ds, "dataset");
    c2l::require(i < ds->ds.size(), c2l::ErrorKind::Contract,
                 "record " + std::to_string(i) + " out of range (" + std::to_string(ds->ds.size()) + " records)");
    const auto& r = ds->ds.spots[i];
    if (patch != nullptr) std::memcpy(patch, r.patch.data(), r.patch.size() * sizeof(float));
    if (genes != nullptr) std::memcpy(genes, r.genes.data(), r.genes.size() * sizeof(float));
  });
}

c2l_status c2l_model_open(c2l_context* ctx, const char* checkpoint_dir, int use_ema, c2l_model** out) {
  return guarded(ctx, [&] {
    need(checkpoint_dir, "checkpoint_dir");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<c2l_model>();
    h->model = c2l::load_model(checkpoint_dir, use_ema != 0);
    *out = h.release();
  });
}

void c2l_model_close(c2l_model* model) { delete model; }

int c2l_model_is_adapted(const c2l_model* model) {
  return model != nullptr && model->model.kind == c2l::CheckpointKind::Adapted ? 1 : 0;
}

size_t c2l_model_gene_dim(const c2l_model* model) {
  return model != nullptr && model->model.adapter ? static_cast<size_t>(model->model.adapter->config().gene_dim) : 0;
}

size_t c2l_model_patch_numel(const c2l_model* model) {
  if (model == nullptr) return 0;
  const auto& c = model->model.net->config();
  return static_cast<size_t>(c.in_channels * c.image_size * c.image_size);
}

c2l_status c2l_model_sample(c2l_context* ctx, const c2l_model* model, const char* sampler_json, const float* genes,
                            size_t n, float* out) {
  return guarded(ctx, [&] {
    need(model, "model");
    need(out, "out");
    c2l::require(n > 0, c2l::ErrorKind::Contract, "n must be positive");
    const auto& m = model->model;
    const auto cfg = c2l::SamplerConfig::from_json(
        sampler_json != nullptr && *sampler_json != '\0' ? c2l::io::json::parse(sampler_json) : c2l::io::json::object());
    const auto& nc = m.net->config();
    const c2l::Shape item{static_cast<std::size_t>(nc.in_channels), static_cast<std::size_t>(nc.image_size),
                          static_cast<std::size_t>(nc.image_size)};
    std::optional<c2l::Tensor> cond;
    if (genes != nullptr) {
      c2l::require(m.adapter != nullptr, c2l::ErrorKind::MissingArtifact,
                   "conditional sampling needs an adapted checkpoint");
      const auto d = static_cast<std::size_t>(m.adapter->config().gene_dim);
      cond.emplace(c2l::Shape{n, d}, std::vector<float>(genes, genes + n * d));
    }
    const auto seeds = c2l::sample_seeds(cfg.seed, n);
    const auto fn = c2l::guided_eps_fn<float>(*m.net, cond ? m.adapter.get() : nullptr, cond ? &*cond : nullptr,
                                              cfg.guidance_scale);
    const auto x = c2l::sample<float>(fn, item, seeds, m.schedule, cfg);
    std::memcpy(out, x.values().data(), x.values().size() * sizeof(float));
  });
}

}  // extern "C"
