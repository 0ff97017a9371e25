// Extracts the pathways of one random image through a small random net and
// prints the largest part of every pathway layer.
#include <iostream>

#include "dpw/dpw.hpp"

int main() {
  using namespace dpw;
  Model m{tiny_spec({1, 16, 16}, 10, 4), {}};
  m.weights = init_weights(m.spec, 1);

  Rng rng(2);
  Tensor image({1, 16, 16});
  for (float& v : image.data()) v = static_cast<float>(rng.uniform());

  const auto trace = forward_trace(m, image);
  const auto result = extract_pathways(m, build_diffusion_kernels(m), trace);
  std::cout << "prediction " << trace.predicted << "\n";
  for (const auto& step : main_pathway(result, 3))
    std::cout << result.layers[step.pathway_index].name << ": channel " << step.channel << ", area "
              << step.area_ratio << "\n";
  std::cout << "portion-hot length " << portion_hot(result, 3).values.size() << "\n";
}
