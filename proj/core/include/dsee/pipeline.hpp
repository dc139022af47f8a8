#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dsee/accounting.hpp"
#include "dsee/decompose.hpp"
#include "dsee/model.hpp"

namespace dsee {

// ---- optimizer ---------------------------------------------------------------

struct AdamWParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamWState {
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

/// One AdamW step over the given parameter views: bias-corrected moment
/// updates, weight decay applied decoupled (directly to the parameter, scaled
/// by lr, not through the gradient). Throws TrainingError on non-finite
/// gradients, naming the parameter group.
void adamw_step(const std::vector<ParamView>& params, const GradientSet& grads,
                AdamWState& state, const AdamWParams& hp);

/// Linearly decayed learning rate for 0-based step i of total_steps.
double linear_decay_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps);

// ---- synthetic tasks ---------------------------------------------------------

enum class TaskKind { Majority, KeyCopy };

TaskKind parse_task_kind(const std::string& tag);
std::string task_kind_name(TaskKind kind);

struct TaskSpec {
    TaskKind kind = TaskKind::KeyCopy;
    int seq_len = 8;
    int n_classes = 8;
    int key_position = 0; // keycopy only
    std::size_t train_size = 2048;
    std::size_t eval_size = 512;
};

struct Dataset {
    TokenBatch tokens;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

struct TaskData {
    Dataset train;
    Dataset eval;
};

/// Deterministic synthetic task. Sequences are unique across train and eval
/// (the splits are disjoint). Labels:
///   majority -> most frequent token; ties go to the class appearing earliest
///               in the sequence, which keeps the label distribution uniform
///   keycopy  -> token at key_position mapped through a seed-dependent
///               permutation of the classes
TaskData make_task(const TaskSpec& spec, std::uint64_t seed);

// ---- pipeline configuration --------------------------------------------------

struct AdapterConfig {
    std::size_t rank = 4;
    std::size_t n_keep = 0;
    SupportMethod method = SupportMethod::Decompose;
    std::vector<std::string> uv_projections = {"q", "k", "v", "o"};
    std::vector<std::string> s2_projections; // empty -> same as uv_projections
    SolverOptions solver;

    std::vector<std::string> s2_sites() const {
        return s2_projections.empty() ? uv_projections : s2_projections;
    }
};

enum class PruneMode { Unstructured, Structured };

PruneMode parse_prune_mode(const std::string& tag);
std::string prune_mode_name(PruneMode mode);

struct PruningConfig {
    PruneMode mode = PruneMode::Unstructured;
    double sparsity = 0.5;    // unstructured mask target
    double head_ratio = 0.25; // structured
    double ffn_ratio = 0.0;   // structured
    double lambda_l1 = 1e-4;  // head-gate penalty, structured stage I
    bool mask_includes_s2 = true; // sort |w + uv + s2| (default) vs |w + uv|
};

struct OptimizerConfig {
    double learning_rate = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool linear_decay = true;
    int batch_size = 32;
    int pretrain_epochs = 30;
    int epochs_stage1 = 3;
    int epochs_stage2 = 0; // stage II is one-shot; accepted for completeness
    int epochs_stage3 = 3;
};

struct TaskConfig {
    TaskKind kind = TaskKind::KeyCopy;
    std::size_t train_size = 2048;
    std::size_t eval_size = 512;
    int key_position = 0;
    std::uint64_t pretrain_seed = 1;
    std::uint64_t finetune_seed = 2;
};

struct BudgetConfig {
    bool include_classifier = true; // count the classifier among trainables
};

struct PipelineConfig {
    ToyTransformerConfig model;
    AdapterConfig adapter;
    PruningConfig pruning;
    OptimizerConfig optimizer;
    TaskConfig task;
    BudgetConfig budget;
    std::uint64_t seed = 42;

    void validate() const;
    TaskSpec task_spec() const;
};

// ---- stage orchestration -----------------------------------------------------

struct StageReport {
    std::string stage;
    std::vector<double> train_loss; // one entry per optimizer step
    double eval_accuracy = 0.0;
    std::uint64_t steps = 0;
    BudgetReport budget;
};

/// Which parameter kinds an optimization stage updates.
struct TrainPlan {
    bool dense = false;
    bool adapters = false;
    bool gates = false;
    bool classifier = false;

    bool trains(ParamKind kind) const;
};

struct PretrainResult {
    ToyTransformer model;
    StageReport report;
};

/// Trains a fresh dense model on the source task until eval accuracy reaches
/// 0.95 or the epoch budget runs out; throws PipelineError below 0.60.
PretrainResult pretrain_dense(const PipelineConfig& cfg);

struct DseeResult {
    ToyTransformer model;
    std::vector<StageReport> reports; // stage1, stage2, stage3
    // structured mode only: per-layer surviving indices chosen at stage II
    std::vector<std::vector<std::size_t>> kept_heads;
    std::vector<std::vector<std::size_t>> kept_ffn;
};

/// Full procedure on a pretrained host: (0) embed supports and fresh updates
/// into the configured projections, (I) train adapters (+ gates when
/// structured) with the pretrained weights frozen, (II) derive unstructured
/// magnitude masks from the merged weights or structurally prune heads/FFN
/// units, (III) recovery-tune the adapters against the fixed masks/shapes.
DseeResult run_dsee(const PipelineConfig& cfg, const ToyTransformer& pretrained);

/// Utility: accuracy over a dataset, evaluated in bounded-size chunks.
double evaluate(const ToyTransformer& model, const Dataset& data);

/// Budget snapshot of a live model under the config's counting rules; throws
/// PipelineError if the analytic site counts disagree with the stored values.
BudgetReport snapshot_budget(const ToyTransformer& model, const PipelineConfig& cfg);

/// Budget from configuration alone (no model instantiated): the planned
/// post-pipeline state. Matches snapshot_budget of an actual run.
BudgetReport plan_budget(const PipelineConfig& cfg);

/// FNV-1a checksum over the raw f32 bytes of pretrained (dense) parameter
/// groups; adapters, gates and classifier excluded.
std::uint64_t pretrained_checksum(const ToyTransformer& model);

} // namespace dsee
