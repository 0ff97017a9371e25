#pragma once

// Portion-hot distance studies over image groups (adversarial triples and
// transform quadruples).

#include <optional>
#include <string>
#include <vector>

#include "dpw/analysis.hpp"
#include "dpw/attack.hpp"
#include "dpw/transforms.hpp"

namespace dpw {

struct StudyResult {
  std::vector<std::string> image_roles;   // e.g. original, adversarial, target
  std::vector<std::string> columns;       // distance column names
  std::vector<std::vector<PortionHotVector>> vectors;  // [group][role]
  std::vector<std::vector<double>> distances;          // [group][column]
  // One population per distance column.
  std::optional<AnovaResult> distance_anova;
  // One population per image role; each vector scalarized as its distance
  // to the center of all vectors in the study.
  std::optional<AnovaResult> role_anova;
};

inline std::optional<AnovaResult> anova_if_defined(const std::vector<std::vector<double>>& groups, double alpha) {
  std::size_t n = 0;
  for (const auto& g : groups) {
    if (g.empty()) return std::nullopt;
    n += g.size();
  }
  if (groups.size() < 2 || n <= groups.size()) return std::nullopt;
  return anova_oneway(groups, alpha);
}

/// Extracts portion-hot vectors for every image of every group (images in
/// parallel, each extraction single-threaded) and derives the distances.
inline StudyResult run_study(const Model& model, const std::vector<std::vector<const Tensor*>>& images,
                             std::vector<std::string> roles, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                             std::vector<std::string> columns, const ExtractOptions& options, std::size_t k,
                             double alpha, std::size_t threads) {
  StudyResult r;
  r.image_roles = std::move(roles);
  r.columns = std::move(columns);
  const DiffusionKernelSet kernels = build_diffusion_kernels(model);
  const std::size_t per = r.image_roles.size();
  r.vectors.assign(images.size(), std::vector<PortionHotVector>(per));
  ExtractOptions single = options;
  single.threads = 1;
  parallel_for(images.size() * per, threads, [&](std::size_t i) {
    r.vectors[i / per][i % per] = portion_hot_of(model, kernels, *images[i / per].at(i % per), single, k);
  });
  r.distances = pairwise_distances(r.vectors, pairs);

  std::vector<std::vector<double>> by_column(r.columns.size());
  for (const auto& row : r.distances)
    for (std::size_t c = 0; c < row.size(); ++c) by_column[c].push_back(row[c]);
  r.distance_anova = anova_if_defined(by_column, alpha);

  if (!r.vectors.empty()) {
    std::vector<PortionHotVector> all;
    for (const auto& g : r.vectors) all.insert(all.end(), g.begin(), g.end());
    const auto scalars = scalarize(all);
    std::vector<std::vector<double>> by_role(per);
    for (std::size_t i = 0; i < scalars.size(); ++i) by_role[i % per].push_back(scalars[i]);
    r.role_anova = anova_if_defined(by_role, alpha);
  }
  return r;
}

inline StudyResult adversarial_study(const Model& model, const AdversarialGroups& groups, const ExtractOptions& options,
                                     std::size_t k, double alpha, std::size_t threads) {
  std::vector<std::vector<const Tensor*>> images;
  for (const auto& g : groups.groups) images.push_back({&g.original, &g.adversarial, &g.target});
  return run_study(model, images, {"original", "adversarial", "target"}, kAdversarialPairs, kAdversarialColumns,
                   options, k, alpha, threads);
}

inline StudyResult transform_study(const Model& model, const TransformGroups& groups, const ExtractOptions& options,
                                   std::size_t k, double alpha, std::size_t threads) {
  std::vector<std::vector<const Tensor*>> images;
  for (const auto& g : groups.groups) images.push_back({&g.original, &g.invariant, &g.variant, &g.target});
  return run_study(model, images, {"original", "invariant", "variant", "target"}, kTransformPairs, kTransformColumns,
                   options, k, alpha, threads);
}

inline nlohmann::json anova_to_json(const AnovaResult& a) {
  return {{"f", a.f_infinite ? nlohmann::json("inf") : nlohmann::json(a.f)},
          {"f_infinite", a.f_infinite},
          {"df_between", a.df_between},
          {"df_within", a.df_within},
          {"ss_between", a.ss_between},
          {"ss_within", a.ss_within},
          {"alpha", a.alpha},
          {"critical", a.critical},
          {"p_value", a.p_value},
          {"significant", a.significant}};
}

}  // namespace dpw
