// dpw: command-line front end for pathway extraction and the studies built on it.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dpw/dpw.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dpw;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Config {
  std::string command;
  std::string model, dataset, out = "out", input, arch = "vgg16", shape = "3,32,32";
  std::size_t index = 0, count = 1, topk = 3, chunk = 64, threads = default_thread_count(), n = 10, classes = 10,
              width = 8;
  std::uint64_t seed = 0;
  std::string channel_mask = "off", layer;
  std::optional<std::size_t> cls;
  double eps = 0.03, alpha = 0.05;
  bool no_masks_dump = false;

  json to_json() const {
    json j{{"command", command}, {"out", out},     {"seed", seed},   {"topk", topk},
           {"chunk", chunk},     {"threads", threads}, {"eps", eps}, {"alpha", alpha}};
    if (!model.empty()) j["model"] = fs::absolute(model).string();
    if (!dataset.empty()) j["dataset"] = fs::absolute(dataset).string();
    if (!input.empty()) j["input"] = fs::absolute(input).string();
    j["index"] = index;
    j["count"] = count;
    j["channel_mask"] = channel_mask;
    j["layer"] = layer;
    j["n"] = n;
    j["class"] = cls ? json(*cls) : json(nullptr);
    j["no_masks_dump"] = no_masks_dump;
    if (command == "init-model") {
      j["arch"] = arch;
      j["shape"] = shape;
      j["classes"] = classes;
      j["width"] = width;
    }
    return j;
  }
};

// ---- helpers -------------------------------------------------------------------------

void need(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

void need_file(const std::string& path, const char* flag) {
  need(path, flag);
  require(fs::is_regular_file(path), Errc::io, std::string(flag) + ": no such file '" + path + "'");
}

std::optional<std::size_t> parse_channel_mask(const std::string& s) {
  if (s == "off") return std::nullopt;
  if (s.rfind("topk:", 0) == 0) {
    std::size_t k = 0;
    const auto* b = s.data() + 5;
    const auto [p, ec] = std::from_chars(b, s.data() + s.size(), k);
    if (ec == std::errc() && p == s.data() + s.size() && k > 0) return k;
  }
  throw UsageError("--channel-mask must be 'off' or 'topk:N' with N >= 1");
}

Shape parse_shape(const std::string& s) {
  Shape shape;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || p != part.data() + part.size() || v == 0) throw UsageError("bad --shape '" + s + "'");
    shape.push_back(v);
  }
  if (shape.size() != 3) throw UsageError("--shape needs C,H,W");
  return shape;
}

// Pathway position from "L<p>", "<p>" or a pathway layer name.
std::size_t resolve_pathway_layer(const ModelSpec& spec, const std::string& s) {
  std::string digits = s.size() > 1 && s[0] == 'L' ? s.substr(1) : s;
  std::size_t p = 0;
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), p);
  if (ec == std::errc() && ptr == digits.data() + digits.size()) {
    require(p < spec.pathway_layers.size(), Errc::out_of_range, "pathway layer " + s + " out of range");
    return p;
  }
  return spec.pathway_position(spec.find(s));
}

std::optional<std::size_t> optional_layer(const ModelSpec& spec, const std::string& s) {
  if (s.empty()) return std::nullopt;
  return resolve_pathway_layer(spec, s);
}

ExtractOptions extract_options(const Config& c) {
  ExtractOptions o;
  o.channel_topk = parse_channel_mask(c.channel_mask);
  o.chunk = c.chunk;
  o.threads = c.threads;
  return o;
}

struct Data {
  LabeledDataset raw;
  Preprocess pre;

  Tensor image(std::size_t i, const Shape& input) const {
    require(i < raw.size(), Errc::out_of_range,
            "index " + std::to_string(i) + " out of range (dataset has " + std::to_string(raw.size()) + " images)");
    require(raw.channels == input[0], Errc::shape_mismatch, "dataset channels do not match the model input");
    return to_tensor(raw, i, pre, std::pair{input[1], input[2]});
  }

  TensorDataset all(const Shape& input) const {
    TensorDataset d;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      d.images.push_back(image(i, input));
      d.labels.push_back(raw.labels[i]);
    }
    return d;
  }
};

Data load_data(const Config& c) {
  need_file(c.dataset, "--dataset");
  const auto m = load_manifest(c.dataset);
  return {load_dataset(m), m.preprocess};
}

Model load_checked_model(const Config& c) {
  need_file(c.model, "--model");
  return load_model(c.model);
}

void check_range(const Data& d, const Config& c) {
  require(c.count >= 1, Errc::invalid_argument, "--count must be at least 1");
  require(c.index < d.raw.size() && c.count <= d.raw.size() - c.index, Errc::out_of_range,
          "images " + std::to_string(c.index) + ".." + std::to_string(c.index + c.count - 1) +
              " out of range (dataset has " + std::to_string(d.raw.size()) + " images)");
}

fs::path out_dir(const Config& c) {
  fs::create_directories(c.out);
  return fs::path(c.out);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  require(static_cast<bool>(f), Errc::io, "cannot write '" + p.string() + "'");
  f << s;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

void write_run(const Config& c) { write_json(out_dir(c) / "run.json", c.to_json()); }

std::vector<std::string> row_of(const std::string& id, const std::vector<double>& values) {
  std::vector<std::string> r{id};
  for (double v : values) r.push_back(format_real(v));
  return r;
}

// Reads rows of "id,v1,v2,...". With a header, the first line is returned separately.
struct Table {
  std::vector<std::string> header, ids;
  std::vector<std::vector<double>> rows;
};

Table read_table(const std::string& path, bool header) {
  need_file(path, "--input");
  std::ifstream in(path);
  Table t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (first && header) {
      t.header = fields;
      first = false;
      continue;
    }
    first = false;
    require(fields.size() >= 2, Errc::malformed_header, path + ": row with no values");
    t.ids.push_back(fields[0]);
    std::vector<double> v;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      double x = 0;
      const auto [p, ec] = std::from_chars(fields[i].data(), fields[i].data() + fields[i].size(), x);
      require(ec == std::errc() && p == fields[i].data() + fields[i].size(), Errc::malformed_header,
              path + ": bad number '" + fields[i] + "'");
      v.push_back(x);
    }
    require(t.rows.empty() || v.size() == t.rows.front().size(), Errc::malformed_header, path + ": ragged rows");
    t.rows.push_back(std::move(v));
  }
  return t;
}

json layers_json(const ModelSpec& spec, const PathwayResult& r) {
  json layers = json::array();
  for (const auto& a : r.layers)
    layers.push_back({{"pathway_index", a.pathway_index},
                      {"layer_index", a.layer_index},
                      {"name", a.name},
                      {"shape", a.values.shape()},
                      {"kind", to_string(spec.layers[a.layer_index].kind)}});
  return layers;
}

void write_parts(const fs::path& dir, const PathwayResult& r, std::size_t topk, std::optional<std::size_t> only,
                 bool dump_masks) {
  json parts = json::array();
  if (dump_masks) fs::create_directories(dir / "parts");
  for (const auto& a : r.layers) {
    if (only && a.pathway_index != *only) continue;
    const auto pa = parts_topk(a, std::min(topk, a.values.dim(2)));
    const auto order = pa.parts_by_area();
    json entries = json::array();
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      entries.push_back({{"channel", order[rank]}, {"pixels", pa.part_pixels[order[rank]]},
                         {"area_ratio", pa.area_ratio(order[rank])}});
      if (dump_masks && rank < topk) {
        const std::string name = "L" + std::to_string(a.pathway_index) + "_r" + std::to_string(rank) + "_c" +
                                 std::to_string(order[rank]) + ".pgm";
        write_pnm((dir / "parts" / name).string(), pa.part_mask(order[rank]));
      }
    }
    parts.push_back({{"pathway_index", a.pathway_index}, {"name", a.name}, {"k", pa.k}, {"parts", entries}});
  }
  write_json(dir / "parts.json", parts);
}

struct Extracted {
  ForwardTrace trace;
  PathwayResult result;
};

Extracted extract_one(const Model& m, const Tensor& image, const ExtractOptions& o) {
  Extracted e{forward_trace(m, image), {}};
  e.result = extract_pathways(m, build_diffusion_kernels(m), e.trace, o);
  return e;
}

// ---- commands ------------------------------------------------------------------------

int cmd_init_model(const Config& c) {
  const Shape shape = parse_shape(c.shape);
  Model m;
  if (c.arch == "vgg16") m.spec = vgg16_spec(shape, c.classes);
  else if (c.arch == "tiny") m.spec = tiny_spec(shape, c.classes, c.width);
  else throw UsageError("--arch must be vgg16 or tiny");
  m.weights = init_weights(m.spec, c.seed);
  save_model((out_dir(c) / "model.dpwn").string(), m);
  write_run(c);
  return 0;
}

int cmd_classify(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  const Tensor x = d.image(c.index, m.spec.input_shape);
  const ForwardTrace t = forward_trace(m, x);
  json j{{"index", c.index},
         {"label", d.raw.labels[c.index]},
         {"prediction", t.predicted},
         {"logits", std::vector<double>(t.logits.data().begin(), t.logits.data().end())}};
  write_run(c);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_pathways(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  const auto o = extract_options(c);
  const Tensor x = d.image(c.index, m.spec.input_shape);
  const Extracted e = extract_one(m, x, o);
  const auto dir = out_dir(c);

  json header{{"kind", "pathway_aggregates"},
              {"index", c.index},
              {"label", d.raw.labels[c.index]},
              {"prediction", e.trace.predicted},
              {"layers", layers_json(m.spec, e.result)}};
  DpwnFile f;
  f.header = header;
  for (const auto& a : e.result.layers) f.tensors64["agg/L" + std::to_string(a.pathway_index)] = a.values;
  write_dpwn((dir / "aggregates.dpwn").string(), f);
  if (!e.result.kept_channels.empty()) header["kept_channels"] = e.result.kept_channels;
  write_json(dir / "aggregates.json", header);

  write_parts(dir, e.result, c.topk, std::nullopt, !c.no_masks_dump);
  const std::optional<std::size_t> sal_layer = optional_layer(m.spec, c.layer);
  write_pnm((dir / "saliency.pgm").string(), saliency_map(e.result, sal_layer).normalized);
  CsvWriter((dir / "portion_hot.csv").string()).row(row_of(std::to_string(c.index), portion_hot(e.result, c.topk).values));

  CsvWriter mp((dir / "main_pathway.csv").string());
  mp.row({"pathway_index", "name", "channel", "area_ratio", "part_count"});
  for (const auto& s : main_pathway(e.result, c.topk))
    mp.row({std::to_string(s.pathway_index), e.result.layers[s.pathway_index].name, std::to_string(s.channel),
            format_real(s.area_ratio), std::to_string(s.part_count)});
  write_run(c);
  return 0;
}

int cmd_parts(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  const std::optional<std::size_t> only = optional_layer(m.spec, c.layer);
  const Extracted e = extract_one(m, d.image(c.index, m.spec.input_shape), extract_options(c));
  write_parts(out_dir(c), e.result, c.topk, only, !c.no_masks_dump);
  write_run(c);
  return 0;
}

int cmd_saliency(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  const std::optional<std::size_t> layer = optional_layer(m.spec, c.layer);
  const Extracted e = extract_one(m, d.image(c.index, m.spec.input_shape), extract_options(c));
  const auto s = saliency_map(e.result, layer);
  const auto dir = out_dir(c);
  write_pnm((dir / "saliency.pgm").string(), s.normalized);
  write_json(dir / "saliency.json", {{"layer", e.result.layers[layer.value_or(e.result.layers.size() - 1)].name},
                                     {"shape", s.heat.shape()},
                                     {"heat", s.heat.values()}});
  write_run(c);
  return 0;
}

std::vector<PortionHotVector> portion_hot_range(const Model& m, const Data& d, const Config& c) {
  check_range(d, c);
  ExtractOptions single = extract_options(c);
  single.threads = 1;
  const auto kernels = build_diffusion_kernels(m);
  std::vector<PortionHotVector> v(c.count);
  parallel_for(c.count, c.threads, [&](std::size_t i) {
    v[i] = portion_hot_of(m, kernels, d.image(c.index + i, m.spec.input_shape), single, c.topk);
  });
  return v;
}

int cmd_portion_hot(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  const auto v = portion_hot_range(m, d, c);
  CsvWriter w((out_dir(c) / "portion_hot.csv").string());
  for (std::size_t i = 0; i < v.size(); ++i) w.row(row_of(std::to_string(c.index + i), v[i].values));
  write_run(c);
  return 0;
}

std::vector<PortionHotVector> vectors_of(const Table& t, std::size_t k) {
  std::vector<PortionHotVector> v;
  for (const auto& r : t.rows) v.push_back({r, k});
  return v;
}

int cmd_distances(const Config& c) {
  const Table t = read_table(c.input, false);
  const auto v = vectors_of(t, c.topk);
  CsvWriter w((out_dir(c) / "distances.csv").string());
  std::vector<std::string> head{"id"};
  head.insert(head.end(), t.ids.begin(), t.ids.end());
  w.row(head);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::vector<double> row;
    for (std::size_t j = 0; j < v.size(); ++j) row.push_back(l2_distance(v[i], v[j]));
    w.row(row_of(t.ids[i], row));
  }
  write_run(c);
  return 0;
}

int cmd_centers(const Config& c) {
  const Table t = read_table(c.input, false);
  const Data d = load_data(c);
  std::vector<std::int64_t> labels;
  for (const auto& id : t.ids) {
    std::size_t i = 0;
    const auto [p, ec] = std::from_chars(id.data(), id.data() + id.size(), i);
    require(ec == std::errc() && p == id.data() + id.size(), Errc::malformed_header,
            "centers needs dataset indices as row ids, got '" + id + "'");
    require(i < d.raw.size(), Errc::out_of_range, "row id " + id + " out of range");
    labels.push_back(d.raw.labels[i]);
  }
  const auto cc = category_centers(vectors_of(t, c.topk), labels);
  CsvWriter w((out_dir(c) / "centers.csv").string());
  for (const auto& [label, center] : cc.per_label) {
    auto row = row_of(std::to_string(label), center);
    row.insert(row.begin() + 1, std::to_string(cc.counts.at(label)));
    w.row(row);
  }
  auto g = row_of("global", cc.global);
  g.insert(g.begin() + 1, std::to_string(t.rows.size()));
  w.row(g);
  write_run(c);
  return 0;
}

int cmd_anova(const Config& c) {
  const Table t = read_table(c.input, true);
  require(!t.rows.empty(), Errc::invalid_argument, "no rows in '" + c.input + "'");
  std::vector<std::vector<double>> groups(t.rows.front().size());
  for (const auto& r : t.rows)
    for (std::size_t i = 0; i < r.size(); ++i) groups[i].push_back(r[i]);
  const auto a = anova_oneway(groups, c.alpha);
  json j = anova_to_json(a);
  if (t.header.size() == groups.size() + 1) j["groups"] = std::vector<std::string>(t.header.begin() + 1, t.header.end());
  write_json(out_dir(c) / "anova.json", j);
  write_run(c);
  std::cout << j.dump() << "\n";
  return 0;
}

void write_study(const fs::path& dir, const StudyResult& s, json groups_json, std::size_t requested, bool partial,
                 std::size_t examined, const std::vector<std::vector<const Tensor*>>& images) {
  groups_json = {{"requested", requested},
                 {"built", s.vectors.size()},
                 {"examined", examined},
                 {"partial", partial},
                 {"roles", s.image_roles},
                 {"columns", s.columns},
                 {"groups", std::move(groups_json)}};
  if (partial) {
    groups_json["warning"] = "only " + std::to_string(s.vectors.size()) + " of " + std::to_string(requested) +
                             " groups could be built after examining " + std::to_string(examined) + " images";
    std::cerr << "warning: " << groups_json["warning"].get<std::string>() << "\n";
  }
  write_json(dir / "groups.json", groups_json);

  DpwnFile f;
  f.header = {{"kind", "study_images"}, {"roles", s.image_roles}, {"groups", s.vectors.size()}};
  for (std::size_t g = 0; g < images.size(); ++g)
    for (std::size_t r = 0; r < images[g].size(); ++r)
      f.tensors["g" + std::to_string(g) + "/" + s.image_roles[r]] = *images[g][r];
  write_dpwn((dir / "images.dpwn").string(), f);

  CsvWriter dist((dir / "distances.csv").string());
  std::vector<std::string> head{"group"};
  head.insert(head.end(), s.columns.begin(), s.columns.end());
  dist.row(head);
  for (std::size_t g = 0; g < s.distances.size(); ++g) dist.row(row_of(std::to_string(g), s.distances[g]));

  CsvWriter ph((dir / "portion_hot.csv").string());
  for (std::size_t g = 0; g < s.vectors.size(); ++g)
    for (std::size_t r = 0; r < s.vectors[g].size(); ++r)
      ph.row(row_of("g" + std::to_string(g) + "/" + s.image_roles[r], s.vectors[g][r].values));

  json an{{"distance_anova", s.distance_anova ? anova_to_json(*s.distance_anova) : json(nullptr)},
          {"role_anova", s.role_anova ? anova_to_json(*s.role_anova) : json(nullptr)}};
  write_json(dir / "anova.json", an);
}

int cmd_study_adversarial(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  require(c.count >= 1, Errc::invalid_argument, "--count must be at least 1");
  AttackConfig ac;
  ac.epsilon = c.eps;
  if (!d.pre.mean.empty()) {
    // Clip to the preprocessed image of the [0, 255] pixel range.
    ac.lo = std::numeric_limits<float>::max();
    ac.hi = std::numeric_limits<float>::lowest();
    for (std::size_t ch = 0; ch < d.raw.channels; ++ch) {
      ac.lo = std::min(ac.lo, d.pre.apply(0, ch));
      ac.hi = std::max(ac.hi, d.pre.apply(255, ch));
    }
  }
  const auto data = d.all(m.spec.input_shape);
  const auto groups = build_adversarial_groups(m, data, c.count, ac, c.seed, c.threads);
  const auto s = adversarial_study(m, groups, extract_options(c), c.topk, c.alpha, c.threads);
  json gj = json::array();
  std::vector<std::vector<const Tensor*>> images;
  for (const auto& g : groups.groups) {
    gj.push_back({{"original_index", g.original_index},
                  {"label", g.label},
                  {"adversarial_prediction", g.adversarial_prediction},
                  {"epsilon", g.epsilon},
                  {"target_index", g.target_index}});
    images.push_back({&g.original, &g.adversarial, &g.target});
  }
  write_study(out_dir(c), s, gj, c.count, groups.partial, groups.examined, images);
  write_run(c);
  return 0;
}

int cmd_study_transform(const Config& c, TransformKind kind) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  require(c.count >= 1, Errc::invalid_argument, "--count must be at least 1");
  const auto data = d.all(m.spec.input_shape);
  const auto groups = build_transform_groups(m, data, kind, c.count, c.seed, c.threads);
  const auto s = transform_study(m, groups, extract_options(c), c.topk, c.alpha, c.threads);
  json gj = json::array();
  std::vector<std::vector<const Tensor*>> images;
  for (const auto& g : groups.groups) {
    gj.push_back({{"original_index", g.original_index},
                  {"label", g.label},
                  {"invariant_transform", g.invariant_transform.to_json()},
                  {"variant_transform", g.variant_transform.to_json()},
                  {"variant_prediction", g.variant_prediction},
                  {"target_index", g.target_index}});
    images.push_back({&g.original, &g.invariant, &g.variant, &g.target});
  }
  write_study(out_dir(c), s, gj, c.count, groups.partial, groups.examined, images);
  write_run(c);
  return 0;
}

int cmd_gradcam(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  const Tensor x = d.image(c.index, m.spec.input_shape);
  const Extracted e = extract_one(m, x, extract_options(c));
  const std::size_t cls = c.cls.value_or(e.trace.predicted);
  require(cls < m.spec.classes, Errc::out_of_range, "--class out of range");
  const std::string layer = c.layer.empty() ? default_cam_layer(m.spec) : c.layer;
  const auto cam = grad_cam(m, e.trace, cls, layer);
  const auto dir = out_dir(c);
  write_pnm((dir / "gradcam.pgm").string(), cam.heatmap);
  // Pathway saliency at the same layer, resized to the input for side-by-side viewing.
  const std::size_t pos = m.spec.pathway_position(m.spec.find(layer));
  const auto sal = saliency_map(e.result, pos);
  write_pnm((dir / "saliency.pgm").string(), normalize_minmax(resize_bilinear(sal.heat, x.dim(1), x.dim(2))));
  write_json(dir / "gradcam.json", {{"layer", cam.layer},
                                    {"class", cls},
                                    {"prediction", e.trace.predicted},
                                    {"weights", cam.weights},
                                    {"cam_shape", cam.cam.shape()}});
  write_run(c);
  return 0;
}

int cmd_overlap(const Config& c) {
  const Model m = load_checked_model(c);
  const Data d = load_data(c);
  check_range(d, c);
  require(c.n >= 1, Errc::invalid_argument, "--n must be at least 1");
  const std::size_t P = m.spec.pathway_layers.size();
  std::vector<std::vector<std::size_t>> largest(c.count, std::vector<std::size_t>(P)), smallest = largest;
  ExtractOptions single = extract_options(c);
  single.threads = 1;
  const auto kernels = build_diffusion_kernels(m);
  parallel_for(c.count, c.threads, [&](std::size_t i) {
    const auto t = forward_trace(m, d.image(c.index + i, m.spec.input_shape));
    const auto r = extract_pathways(m, kernels, t, single);
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t n = std::min(c.n, r.layers[p].values.dim(2));
      largest[i][p] = ranking_overlap(r, m, t, p, n);
      smallest[i][p] = ranking_overlap(r, m, t, p, n, true);
    }
  });
  json layers = json::array();
  for (std::size_t p = 0; p < P; ++p) {
    double sl = 0, ss = 0;
    for (std::size_t i = 0; i < c.count; ++i) {
      sl += static_cast<double>(largest[i][p]);
      ss += static_cast<double>(smallest[i][p]);
    }
    const std::size_t li = m.spec.pathway_layers[p];
    layers.push_back({{"pathway_index", p},
                      {"name", m.spec.layers[li].name},
                      {"channels", m.spec.output_shapes[li][0]},
                      {"n", std::min(c.n, m.spec.output_shapes[li][0])},
                      {"mean_largest", sl / static_cast<double>(c.count)},
                      {"mean_smallest", ss / static_cast<double>(c.count)}});
  }
  write_json(out_dir(c) / "overlap.json", {{"n", c.n}, {"images", c.count}, {"layers", layers}});
  write_run(c);
  return 0;
}

int cmd_m2nist(const Config& c) {
  const Data d = load_data(c);
  require(d.raw.channels == 1 && d.raw.height == 28 && d.raw.width == 28, Errc::shape_mismatch,
          "m2nist needs a 28x28 single-channel source dataset");
  require(c.count >= 1, Errc::invalid_argument, "--count must be at least 1");
  const auto g = gen_m2nist(d.raw, c.count, c.seed);
  const auto dir = out_dir(c);
  write_idx(g.data, (dir / "images.idx").string(), (dir / "labels.idx").string());
  DatasetManifest man;
  man.format = "idx";
  man.images = "images.idx";
  man.labels = "labels.idx";
  man.split = d.raw.split;
  write_json(dir / "dataset.json", manifest_to_json(man));
  json boxes = json::array();
  for (std::size_t i = 0; i < g.boxes.size(); ++i) {
    json b = json::array();
    for (std::size_t j = 0; j < g.boxes[i].size(); ++j) {
      const auto& bx = g.boxes[i][j];
      b.push_back({{"y", bx.y}, {"x", bx.x}, {"h", bx.h}, {"w", bx.w}, {"source", g.sources[i][j]},
                   {"label", d.raw.labels[g.sources[i][j]]}});
    }
    boxes.push_back({{"labels", g.data.label_sets[i]}, {"digits", b}});
  }
  write_json(dir / "boxes.json", boxes);
  write_run(c);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion pathway extraction and analysis"};
  app.require_subcommand(1);
  Config c;

  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--out", c.out, "Output directory")->capture_default_str();
    s->add_option("--threads", c.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    return s;
  };
  auto model_data = [&](CLI::App* s) {
    s->add_option("--model", c.model, "Model container (.dpwn)");
    s->add_option("--dataset", c.dataset, "Dataset manifest (.json)");
  };
  auto extraction = [&](CLI::App* s) {
    s->add_option("--topk", c.topk, "Parts per pixel (K)")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--channel-mask", c.channel_mask, "off | topk:N")->capture_default_str();
    s->add_option("--chunk", c.chunk, "Pixels per work item")->capture_default_str()->check(CLI::PositiveNumber);
  };
  auto single = [&](CLI::App* s) { s->add_option("--index", c.index, "Dataset image index")->capture_default_str(); };
  auto range = [&](CLI::App* s) {
    single(s);
    s->add_option("--count", c.count, "Number of images")->capture_default_str();
  };

  auto* classify = sub("classify", "Print the prediction and logits for one image");
  model_data(classify);
  single(classify);

  auto* pathways = sub("pathways", "Extract pathways and write all per-image outputs");
  model_data(pathways);
  extraction(pathways);
  single(pathways);
  pathways->add_option("--layer", c.layer, "Saliency layer (name or L<index>; default: last pathway layer)");
  pathways->add_flag("--no-masks-dump", c.no_masks_dump, "Skip the per-part mask images");

  auto* parts = sub("parts", "Write top-K parts of one image");
  model_data(parts);
  extraction(parts);
  single(parts);
  parts->add_option("--layer", c.layer, "Only this pathway layer");
  parts->add_flag("--no-masks-dump", c.no_masks_dump, "Skip the per-part mask images");

  auto* saliency = sub("saliency", "Write the pathway saliency map of one image");
  model_data(saliency);
  extraction(saliency);
  single(saliency);
  saliency->add_option("--layer", c.layer, "Pathway layer (default: last pathway layer)");

  auto* ph = sub("portion-hot", "Write portion-hot rows for a range of images");
  model_data(ph);
  extraction(ph);
  range(ph);

  auto* distances = sub("distances", "Pairwise distances between portion-hot rows");
  distances->add_option("--input", c.input, "portion_hot.csv")->required();
  distances->add_option("--topk", c.topk, "K the rows were computed with")->capture_default_str();

  auto* centers = sub("centers", "Per-label and global centers of portion-hot rows");
  centers->add_option("--input", c.input, "portion_hot.csv with dataset indices as ids")->required();
  centers->add_option("--dataset", c.dataset, "Dataset manifest for the labels");
  centers->add_option("--topk", c.topk, "K the rows were computed with")->capture_default_str();

  auto* anova = sub("anova", "One-way ANOVA over the value columns of a CSV with a header");
  anova->add_option("--input", c.input, "CSV file")->required();
  anova->add_option("--alpha", c.alpha, "Significance level")->capture_default_str()->check(CLI::Range(0.0, 1.0));

  auto study = [&](const char* name, const char* help) {
    auto* s = sub(name, help);
    model_data(s);
    extraction(s);
    s->add_option("--count", c.count, "Groups to build")->capture_default_str();
    s->add_option("--seed", c.seed, "Seed")->capture_default_str();
    s->add_option("--alpha", c.alpha, "Significance level")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    return s;
  };
  auto* sadv = study("study-adversarial", "FGSM groups: original, adversarial, target");
  sadv->add_option("--eps", c.eps, "Initial FGSM step")->capture_default_str()->check(CLI::NonNegativeNumber);
  auto* srot = study("study-rotate", "Rotation groups: original, invariant, variant, target");
  auto* socc = study("study-occlude", "Occlusion groups: original, invariant, variant, target");

  auto* gradcam = sub("gradcam", "Grad-CAM heatmap next to the pathway saliency map");
  model_data(gradcam);
  extraction(gradcam);
  single(gradcam);
  gradcam->add_option("--layer", c.layer, "Conv layer (default conv3_3, else the last conv)");
  gradcam->add_option("--class", c.cls, "Class to explain (default: prediction)");

  auto* overlap = sub("overlap", "Overlap of pathway and importance channel rankings");
  model_data(overlap);
  extraction(overlap);
  range(overlap);
  overlap->add_option("--n", c.n, "Top-n")->capture_default_str();

  auto* m2nist = sub("m2nist", "Compose multi-digit images from an MNIST dataset");
  m2nist->add_option("--dataset", c.dataset, "MNIST manifest");
  m2nist->add_option("--count", c.count, "Images to generate")->capture_default_str();
  m2nist->add_option("--seed", c.seed, "Seed")->capture_default_str();

  auto* init = sub("init-model", "Write a randomly initialized model");
  init->add_option("--arch", c.arch, "vgg16 | tiny")->capture_default_str();
  init->add_option("--shape", c.shape, "Input C,H,W")->capture_default_str();
  init->add_option("--classes", c.classes, "Number of classes")->capture_default_str()->check(CLI::PositiveNumber);
  init->add_option("--width", c.width, "Channel width of the tiny net")->capture_default_str();
  init->add_option("--seed", c.seed, "Seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::map<std::string, std::function<int(const Config&)>> commands{
      {"classify", cmd_classify},
      {"pathways", cmd_pathways},
      {"parts", cmd_parts},
      {"saliency", cmd_saliency},
      {"portion-hot", cmd_portion_hot},
      {"distances", cmd_distances},
      {"centers", cmd_centers},
      {"anova", cmd_anova},
      {"study-adversarial", cmd_study_adversarial},
      {"study-rotate", [](const Config& c) { return cmd_study_transform(c, TransformKind::rotate); }},
      {"study-occlude", [](const Config& c) { return cmd_study_transform(c, TransformKind::occlude); }},
      {"gradcam", cmd_gradcam},
      {"overlap", cmd_overlap},
      {"m2nist", cmd_m2nist},
      {"init-model", cmd_init_model},
  };
  c.command = app.get_subcommands().front()->get_name();
  (void)srot;
  (void)socc;
  try {
    if (c.command != "init-model" && c.command != "distances" && c.command != "anova") parse_channel_mask(c.channel_mask);
    return commands.at(c.command)(c);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.get_subcommands().front()->help();
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
