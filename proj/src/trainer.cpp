#include "ciseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "ciseg/checkpoint.hpp"
#include "ciseg/nn.hpp"

namespace ciseg {

namespace {

// seed-stream tags
constexpr uint64_t kTagModelInit = 1;
constexpr uint64_t kTagExtend = 2;
constexpr uint64_t kTagHeadGrow = 3;
constexpr uint64_t kTagBatch = 4;
constexpr uint64_t kTagData = 5;

struct PreparedSample {
  Tensor<float> image;  // [3,H,W] in [0,1]
  StepTarget target;
};

PreparedSample prepare(Sample&& s) {
  PreparedSample out;
  const int h = s.scene.height, w = s.scene.width;
  out.image = Tensor<float>({3, h, w});
  for (int64_t i = 0; i < int64_t(3) * h * w; ++i)
    out.image[i] = float(s.scene.image[size_t(i)]) / 255.0f;
  out.target = std::move(s.target);
  return out;
}

// Static partition keeps every result slot owned by exactly one worker, so
// outputs are identical for any worker count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  int per = (n + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    int lo = w * per, hi = std::min(n, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

uint64_t fnv1a(const void* data, size_t bytes, uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

nlohmann::ordered_json queue_meta_json(const QueryQueue<float>& queue) {
  nlohmann::ordered_json groups = nlohmann::ordered_json::array();
  for (const auto& g : queue.groups())
    groups.push_back({{"step", g.step_index},
                      {"classes", g.class_ids},
                      {"queries", g.query_count},
                      {"frozen", g.frozen}});
  return groups;
}

nlohmann::ordered_json record_to_json(const MetricsRecord& r, const std::string& config_hash,
                                      const QueryQueue<float>& queue, TaskMode mode) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["iteration"] = r.iteration;
  j["config_hash"] = config_hash;
  nlohmann::ordered_json pci;
  for (const auto& [c, v] : r.per_class_iou) pci[std::to_string(c)] = v;
  j["per_class_iou"] = pci;
  j["miou_old"] = r.miou_old;
  j["miou_new"] = r.miou_new;
  j["miou_all"] = r.miou_all;
  if (mode == TaskMode::kInstance) {
    j["ap50"] = r.ap50;
    j["ap50_old"] = r.ap50_old;
    j["ap50_new"] = r.ap50_new;
  }
  j["loss"] = {{"l_new", r.loss.l_new}, {"l_q", r.loss.l_q},     {"l_c", r.loss.l_c},
               {"l_m", r.loss.l_m},     {"l_pod", r.loss.l_pod}, {"total", r.loss.total}};
  j["param_count"] = r.param_count;
  j["wall_clock"] = r.wall_clock;
  j["queue"] = queue_meta_json(queue);
  return j;
}

std::map<int, int> class_column_map(const QueryQueue<float>& queue) {
  std::map<int, int> out;
  int col = 0;
  for (int cid : queue.classes_in_order()) out[cid] = col++;
  return out;
}

std::vector<int> column_class_ids(const QueryQueue<float>& queue) {
  return queue.classes_in_order();
}

}  // namespace

void TrainConfig::validate() const {
  if (steps_iterations < 1) throw std::invalid_argument("TrainConfig: iterations must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (eval_interval < 1) throw std::invalid_argument("TrainConfig: eval_interval must be >= 1");
  if (train_size < 1 || test_size < 1) throw std::invalid_argument("TrainConfig: empty split");
  if (protocol.steps < 1) throw std::invalid_argument("TrainConfig: protocol has no steps");
  model.validate();
  if (model.image_h != model.image_w)
    throw std::invalid_argument("TrainConfig: only square images are wired up");
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hc = std::thread::hardware_concurrency();
  return int(std::min(8u, std::max(1u, hc)));
}

uint64_t TeacherSnapshot::checksum() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& name : model.params().names()) {
    const auto& t = model.params().get(name);
    h = fnv1a(t.data(), size_t(t.numel()) * sizeof(float), h);
  }
  for (const auto& g : queue.groups()) {
    h = fnv1a(g.content.data(), size_t(g.content.numel()) * sizeof(float), h);
    h = fnv1a(g.position.data(), size_t(g.position.numel()) * sizeof(float), h);
  }
  return h;
}

int64_t total_param_count(const Model<float>& model, const QueryQueue<float>& queue) {
  int64_t n = model.params().total_scalars();
  for (const auto& g : queue.groups()) n += g.content.numel() + g.position.numel();
  return n;
}

MetricsRecord evaluate_model(const Model<float>& model, const QueryQueue<float>& queue,
                             const TrainConfig& config, int step, int iteration, int threads) {
  DatasetSpec spec{&config.protocol, step,
                   Split::kTest,     config.mode,
                   config.seed,      config.model.image_h,
                   config.model.image_w, config.instances_min,
                   config.instances_max};
  spec.seed = mix_seed(config.seed, kTagData);

  const std::vector<int> cols = column_class_ids(queue);
  const std::vector<int> all_classes = config.protocol.classes_through(step);
  const std::vector<int> new_classes = config.protocol.step_classes[size_t(step)];
  std::vector<int> old_classes;
  for (int c : all_classes)
    if (std::find(new_classes.begin(), new_classes.end(), c) == new_classes.end())
      old_classes.push_back(c);

  struct PerImage {
    std::vector<uint8_t> pred_labels;
    std::vector<uint8_t> gt_labels;
    std::vector<PredInstance> pred_instances;
    std::vector<MaskTarget> gt_instances;
  };
  std::vector<PerImage> results(size_t(config.test_size));

  parallel_for(config.test_size, threads, [&](int i) {
    Sample s = dataset_sample(spec, i);
    PreparedSample ps = prepare(std::move(s));
    Graph<float> g;
    g.recording = false;
    auto preds = model.forward(g, ps.image, queue, false);
    const auto& cl = g.value(preds.class_logits);
    const auto& ml = g.value(preds.mask_logits);
    PerImage& r = results[size_t(i)];
    r.gt_labels = ps.target.semantic;
    r.pred_labels = semantic_inference(cl, ml, cols);
    if (config.mode == TaskMode::kInstance) {
      r.pred_instances = instance_inference(cl, ml, cols);
      r.gt_instances = ps.target.targets;
    }
  });

  IoUAccumulator iou;
  InstanceApAccumulator ap;
  for (const auto& r : results) {
    iou.add(r.pred_labels, r.gt_labels, all_classes);
    if (config.mode == TaskMode::kInstance) ap.add_image(r.pred_instances, r.gt_instances);
  }

  MetricsRecord rec;
  rec.step = step;
  rec.iteration = iteration;
  rec.per_class_iou = iou.per_class();
  rec.miou_old = mean_of(rec.per_class_iou, old_classes);
  rec.miou_new = mean_of(rec.per_class_iou, new_classes);
  rec.miou_all = mean_of(rec.per_class_iou, all_classes);
  if (config.mode == TaskMode::kInstance) {
    rec.ap50 = ap.ap50(all_classes);
    rec.ap50_old = old_classes.empty() ? 0.0 : ap.ap50(old_classes);
    rec.ap50_new = ap.ap50(new_classes);
  }
  rec.param_count = total_param_count(model, queue);
  return rec;
}

TrainResult train_continual(const TrainConfig& config, const std::string& resume_checkpoint) {
  config.validate();
  const int threads = resolve_threads(config.threads);
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  TrainResult result;
  int start_step = 0;
  if (resume_checkpoint.empty()) {
    result.model =
        std::make_unique<Model<float>>(config.model, mix_seed(config.seed, kTagModelInit));
    result.queue = std::make_unique<QueryQueue<float>>(config.model.d_q);
  } else {
    LoadedCheckpoint lc = checkpoint_load(resume_checkpoint);
    if (!config.config_hash.empty() && lc.config_hash != config.config_hash)
      throw std::runtime_error("train_continual: checkpoint hash " + lc.config_hash +
                               " does not match config hash " + config.config_hash);
    result.model = std::move(lc.model);
    result.queue = std::move(lc.queue);
    start_step = lc.step + 1;
    if (start_step >= config.protocol.steps)
      throw std::runtime_error("train_continual: checkpoint already covers every step");
  }
  Model<float>& model = *result.model;
  QueryQueue<float>& queue = *result.queue;

  std::ofstream metrics_out, losses_out;
  const bool writing = !config.out_dir.empty();
  if (writing) {
    std::filesystem::create_directories(config.out_dir);
    auto flags = resume_checkpoint.empty() ? std::ios::trunc : std::ios::app;
    metrics_out.open(std::filesystem::path(config.out_dir) / "metrics.jsonl", flags);
    losses_out.open(std::filesystem::path(config.out_dir) / "losses.jsonl", flags);
    if (!metrics_out || !losses_out)
      throw std::runtime_error("train_continual: cannot write to " + config.out_dir);
  }

  for (int step = start_step; step < config.protocol.steps; ++step) {
    // teacher snapshot precedes any step-t mutation
    std::unique_ptr<TeacherSnapshot> teacher;
    if (step >= 1 && config.ablations.any_kd())
      teacher = std::make_unique<TeacherSnapshot>(model, queue, step - 1);

    queue.extend(config.protocol.step_classes[size_t(step)], config.mode,
                 mix_seed(config.seed, kTagExtend, uint64_t(step)));
    model.grow_class_head(int(config.protocol.step_classes[size_t(step)].size()),
                          mix_seed(config.seed, kTagHeadGrow, uint64_t(step)));
    queue.check_invariants();
    result.param_count_per_step.push_back(total_param_count(model, queue));

    const std::map<int, int> col_of = class_column_map(queue);
    const int last_group = queue.current_step();
    const int new_begin = queue.group_start(last_group);
    const int new_end = new_begin + queue.group(last_group).query_count;

    // frozen-embedding reference copies for the post-step identity assertion
    std::vector<Tensor<float>> frozen_content, frozen_position;
    for (int gi = 0; gi < last_group; ++gi) {
      frozen_content.push_back(queue.group(gi).content);
      frozen_position.push_back(queue.group(gi).position);
    }

    // optimizer over the trainable set: all model parameters plus the
    // unfrozen queue groups (every group when freezing is ablated)
    typename AdamW<float>::Config ocfg;
    ocfg.lr = float(config.learning_rate);
    ocfg.weight_decay = float(config.weight_decay);
    AdamW<float> opt(ocfg);
    std::vector<std::string> trainable_names;
    std::map<std::string, std::vector<int>> trainable_dims;
    auto register_trainable = [&](const std::string& name, Tensor<float>* t) {
      opt.register_param(name, t);
      trainable_names.push_back(name);
      trainable_dims[name] = t->dims();
    };
    for (const auto& name : model.params().names())
      register_trainable(name, &model.params().get(name));
    for (int gi = 0; gi <= last_group; ++gi) {
      if (config.ablations.freeze_queries && gi != last_group) continue;
      std::string base = "queue.g" + std::to_string(gi);
      register_trainable(base + ".content", &queue.group(gi).content);
      register_trainable(base + ".position", &queue.group(gi).position);
    }

    // materialize this step's training pool
    DatasetSpec train_spec{&config.protocol, step,
                           Split::kTrain,    config.mode,
                           mix_seed(config.seed, kTagData), config.model.image_h,
                           config.model.image_w, config.instances_min,
                           config.instances_max};
    std::vector<PreparedSample> pool(size_t(config.train_size));
    parallel_for(config.train_size, threads,
                 [&](int i) { pool[size_t(i)] = prepare(dataset_sample(train_spec, i)); });

    struct WorkerOut {
      std::map<std::string, Tensor<float>> grads;
      LossBreakdown values;
      int64_t frozen_hits = 0;
    };

    for (int iter = 1; iter <= config.steps_iterations; ++iter) {
      SplitMix64 batch_rng(mix_seed(config.seed, kTagBatch, uint64_t(step), uint64_t(iter)));
      std::vector<int> batch_idx(size_t(config.batch_size));
      for (auto& b : batch_idx) b = int(batch_rng.next_below(uint64_t(config.train_size)));

      std::vector<WorkerOut> outs(size_t(config.batch_size));
      parallel_for(config.batch_size, threads, [&](int bi) {
        const PreparedSample& ps = pool[size_t(batch_idx[size_t(bi)])];
        Graph<float> g;
        TeacherOutputs<float> touts;
        const TeacherOutputs<float>* tptr = nullptr;
        if (teacher) {
          touts = teacher_forward(teacher->model, teacher->queue, ps.image);
          tptr = &touts;
        }
        auto ep = build_episode_loss(g, model, queue, ps.image, ps.target, col_of, tptr,
                                     config.ablations, config.loss_weights, config.cost_weights,
                                     config.pod_scales);
        g.backward(ep.loss.total);
        WorkerOut& wo = outs[size_t(bi)];
        wo.values = ep.values;
        for (const auto& [q, gt] : ep.assignment.pairs)
          if (q < new_begin || q >= new_end) ++wo.frozen_hits;
        for (const auto& name : trainable_names) {
          Var leaf{};
          auto pit = ep.preds.param_leaves.find(name);
          if (pit != ep.preds.param_leaves.end()) {
            leaf = pit->second;
          } else {
            auto qit = ep.preds.query_leaves.find(name);
            if (qit != ep.preds.query_leaves.end()) leaf = qit->second;
          }
          if (!leaf.valid()) continue;
          const Tensor<float>& grad = g.grad(leaf);
          if (!grad.empty())
            wo.grads[name] = grad;
        }
      });

      // fixed-order reduction: results are independent of the worker count
      std::map<std::string, Tensor<float>> grads;
      LossBreakdown mean_loss;
      for (int bi = 0; bi < config.batch_size; ++bi) {
        const WorkerOut& wo = outs[size_t(bi)];
        result.frozen_assignment_violations += wo.frozen_hits;
        mean_loss.l_new += wo.values.l_new;
        mean_loss.l_q += wo.values.l_q;
        mean_loss.l_c += wo.values.l_c;
        mean_loss.l_m += wo.values.l_m;
        mean_loss.l_pod += wo.values.l_pod;
        mean_loss.total += wo.values.total;
        for (const auto& [name, gt] : wo.grads) {
          auto it = grads.find(name);
          if (it == grads.end()) {
            grads[name] = gt;
          } else {
            Tensor<float>& acc = it->second;
            for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += gt[i];
          }
        }
      }
      const float inv_b = 1.0f / float(config.batch_size);
      mean_loss.l_new *= inv_b;
      mean_loss.l_q *= inv_b;
      mean_loss.l_c *= inv_b;
      mean_loss.l_m *= inv_b;
      mean_loss.l_pod *= inv_b;
      mean_loss.total *= inv_b;
      for (auto& [name, gt] : grads)
        for (int64_t i = 0; i < gt.numel(); ++i) gt[i] *= inv_b;
      // parameters untouched by this batch still need zero-filled slots
      for (const auto& name : trainable_names)
        if (!grads.count(name)) grads[name] = Tensor<float>(trainable_dims.at(name));
      opt.step(grads);

      if (losses_out) {
        nlohmann::ordered_json j;
        j["step"] = step;
        j["iteration"] = iter;
        j["l_new"] = mean_loss.l_new;
        j["l_q"] = mean_loss.l_q;
        j["l_c"] = mean_loss.l_c;
        j["l_m"] = mean_loss.l_m;
        j["l_pod"] = mean_loss.l_pod;
        j["total"] = mean_loss.total;
        losses_out << j.dump() << "\n";
      }

      if (iter % config.eval_interval == 0 || iter == config.steps_iterations) {
        MetricsRecord rec = evaluate_model(model, queue, config, step, iter, threads);
        rec.loss = mean_loss;
        rec.wall_clock = config.record_wall_clock ? elapsed() : 0.0;
        result.metrics.push_back(rec);
        if (metrics_out)
          metrics_out << record_to_json(rec, config.config_hash, queue, config.mode).dump()
                      << "\n";
        if (iter == config.steps_iterations) result.end_of_step.push_back(rec);
      }
    }

    // frozen groups must be bit-identical to their state at step start
    if (config.ablations.freeze_queries) {
      for (int gi = 0; gi < last_group; ++gi) {
        const auto& g = queue.group(gi);
        if (std::memcmp(g.content.data(), frozen_content[size_t(gi)].data(),
                        size_t(g.content.numel()) * sizeof(float)) != 0 ||
            std::memcmp(g.position.data(), frozen_position[size_t(gi)].data(),
                        size_t(g.position.numel()) * sizeof(float)) != 0)
          throw std::logic_error("train_continual: frozen group " + std::to_string(gi) +
                                 " drifted during step " + std::to_string(step));
      }
    }

    if (writing)
      checkpoint_save((std::filesystem::path(config.out_dir) /
                       ("checkpoint_step" + std::to_string(step) + ".ckpt"))
                          .string(),
                      model, queue, step, config.mode, config.config_hash);
  }

  if (writing) {
    nlohmann::ordered_json summary;
    summary["config_hash"] = config.config_hash;
    summary["steps"] = config.protocol.steps;
    summary["wall_clock_seconds"] = elapsed();
    summary["frozen_assignment_violations"] = result.frozen_assignment_violations;
    std::ofstream sf(std::filesystem::path(config.out_dir) / "run_summary.json");
    sf << summary.dump(2) << "\n";
  }
  return result;
}

}  // namespace ciseg
