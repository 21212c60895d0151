#pragma once

#include "deepclust/engine.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace deepclust::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int
{
  kOk         = 0,
  kUsage      = 1,
  kDataError  = 2,
  kRunFailure = 3,
};

/// Error carrying the exit code it maps to.
class CliError : public Error
{
public:
  CliError(int code, std::string const &what)
    : Error(what)
    , code_(code)
  {}

  int code() const noexcept
  {
    return code_;
  }

private:
  int code_;
};

/// Everything a training run needs, as read from a config file plus flags.
struct TrainSettings
{
  std::string         data_path;
  data::AugmentConfig augment;
  engine::RunConfig   run;
};

namespace detail {

template <typename V>
void read_field(json const &section, std::string const &section_name, char const *key, V &out)
{
  auto it = section.find(key);
  if (it == section.end())
    return;
  try
  {
    if constexpr (std::is_same_v<V, double>)
    {
      if (!it->is_number())
        throw std::invalid_argument("expected a number");
      out = it->get<double>();
    }
    else if constexpr (std::is_same_v<V, bool>)
    {
      if (!it->is_boolean())
        throw std::invalid_argument("expected true or false");
      out = it->get<bool>();
    }
    else if constexpr (std::is_same_v<V, std::string>)
    {
      if (!it->is_string())
        throw std::invalid_argument("expected a string");
      out = it->get<std::string>();
    }
    else
    {
      if (!it->is_number_unsigned())
        throw std::invalid_argument("expected a non-negative integer");
      out = it->get<V>();
    }
  }
  catch (std::exception const &e)
  {
    throw CliError(kUsage, "config key '" + section_name + "." + key + "': " + e.what());
  }
}

inline void reject_unknown(json const &section, std::string const &name, std::vector<std::string> const &known)
{
  if (!section.is_object())
    throw CliError(kUsage, "config section '" + name + "' must be an object");
  for (auto const &[key, value] : section.items())
  {
    if (std::find(known.begin(), known.end(), key) == known.end())
    {
      std::string list;
      for (auto const &k : known)
        list += (list.empty() ? "" : ", ") + k;
      throw CliError(kUsage, "unknown config key '" + name + "." + key + "' (known: " + list + ")");
    }
  }
}

}  // namespace detail

/// Applies a config document on top of s. Unknown sections or keys are errors.
inline void apply_config(json const &doc, TrainSettings &s)
{
  if (!doc.is_object())
    throw CliError(kUsage, "config must be a JSON object");
  for (auto const &[name, value] : doc.items())
  {
    if (name != "dataset" && name != "augment" && name != "network" && name != "sgd" && name != "run")
      throw CliError(kUsage, "unknown config section '" + name + "' (known: dataset, augment, network, sgd, run)");
  }
  using detail::read_field;
  if (doc.contains("dataset"))
  {
    auto const &d = doc["dataset"];
    detail::reject_unknown(d, "dataset", {"path", "num_classes_hint"});
    read_field(d, "dataset", "path", s.data_path);
    read_field(d, "dataset", "num_classes_hint", s.run.num_classes_hint);
  }
  if (doc.contains("augment"))
  {
    auto const &a = doc["augment"];
    detail::reject_unknown(a, "augment",
                           {"rotation_degrees", "scale_lo", "scale_hi", "aspect_lo", "aspect_hi", "output_size"});
    read_field(a, "augment", "rotation_degrees", s.augment.rotation_degrees);
    read_field(a, "augment", "scale_lo", s.augment.scale_lo);
    read_field(a, "augment", "scale_hi", s.augment.scale_hi);
    read_field(a, "augment", "aspect_lo", s.augment.aspect_lo);
    read_field(a, "augment", "aspect_hi", s.augment.aspect_hi);
    read_field(a, "augment", "output_size", s.augment.output_size);
  }
  if (doc.contains("network"))
  {
    auto const &n = doc["network"];
    detail::reject_unknown(n, "network", {"preset", "input_channels", "pool_output"});
    read_field(n, "network", "preset", s.run.arch.preset);
    read_field(n, "network", "input_channels", s.run.arch.input_channels);
    read_field(n, "network", "pool_output", s.run.arch.pool_output);
  }
  if (doc.contains("sgd"))
  {
    auto const &g = doc["sgd"];
    detail::reject_unknown(g, "sgd", {"learning_rate", "momentum", "weight_decay"});
    read_field(g, "sgd", "learning_rate", s.run.sgd.learning_rate);
    read_field(g, "sgd", "momentum", s.run.sgd.momentum);
    read_field(g, "sgd", "weight_decay", s.run.sgd.weight_decay);
  }
  if (doc.contains("run"))
  {
    auto const &r = doc["run"];
    detail::reject_unknown(r, "run",
                           {"epochs", "batch_size", "oversegmentation_factor", "k", "seed", "checkpoint_every",
                            "kmeans_max_iters", "epoch_size", "export_assignments"});
    read_field(r, "run", "epochs", s.run.epochs);
    read_field(r, "run", "batch_size", s.run.batch_size);
    read_field(r, "run", "oversegmentation_factor", s.run.oversegmentation_factor);
    read_field(r, "run", "k", s.run.k_override);
    read_field(r, "run", "seed", s.run.seed);
    read_field(r, "run", "checkpoint_every", s.run.checkpoint_every);
    read_field(r, "run", "kmeans_max_iters", s.run.kmeans_max_iters);
    read_field(r, "run", "epoch_size", s.run.epoch_size);
    read_field(r, "run", "export_assignments", s.run.export_assignments);
  }
}

inline json to_json(TrainSettings const &s)
{
  json doc;
  doc["dataset"] = {{"path", s.data_path}, {"num_classes_hint", s.run.num_classes_hint}};
  doc["augment"] = {{"rotation_degrees", s.augment.rotation_degrees},
                    {"scale_lo", s.augment.scale_lo},
                    {"scale_hi", s.augment.scale_hi},
                    {"aspect_lo", s.augment.aspect_lo},
                    {"aspect_hi", s.augment.aspect_hi},
                    {"output_size", s.augment.output_size}};
  doc["network"] = {{"preset", s.run.arch.preset},
                    {"input_channels", s.run.arch.input_channels},
                    {"pool_output", s.run.arch.pool_output}};
  doc["sgd"]     = {{"learning_rate", s.run.sgd.learning_rate},
                    {"momentum", s.run.sgd.momentum},
                    {"weight_decay", s.run.sgd.weight_decay}};
  doc["run"]     = {{"epochs", s.run.epochs},
                    {"batch_size", s.run.batch_size},
                    {"oversegmentation_factor", s.run.oversegmentation_factor},
                    {"k", s.run.k_override},
                    {"seed", s.run.seed},
                    {"checkpoint_every", s.run.checkpoint_every},
                    {"kmeans_max_iters", s.run.kmeans_max_iters},
                    {"epoch_size", s.run.epoch_size},
                    {"export_assignments", s.run.export_assignments}};
  return doc;
}

inline json read_json_file(fs::path const &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw CliError(kUsage, "cannot open config file " + path.string());
  try
  {
    return json::parse(in);
  }
  catch (json::parse_error const &e)
  {
    throw CliError(kUsage, "config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_text(fs::path const &path, std::string const &text)
{
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush())
    throw IoError("cannot write " + path.string());
}

inline bool non_empty_dir(fs::path const &p)
{
  return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p));
}

// ---------------------------------------------------------------- metrics CSV

/// One parsed metrics.csv row; nmi_prev is NaN when the field is empty.
struct MetricsRow
{
  double epoch, loss, nmi_prev, nmi_labels, purity;
};

inline std::vector<MetricsRow> read_metrics_csv(fs::path const &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw IoError(path.string() + ":1: missing header");
  if (!line.empty() && line.back() == '\r')
    line.pop_back();
  if (line != metrics::kMetricsHeader)
    throw IoError(path.string() + ":1: unexpected header '" + line + "'");
  std::vector<MetricsRow> rows;
  std::size_t             line_no = 1;
  while (std::getline(in, line))
  {
    ++line_no;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.empty())
      continue;
    std::vector<std::string> fields;
    std::stringstream        ss(line);
    std::string              f;
    while (std::getline(ss, f, ','))
      fields.push_back(f);
    if (!line.empty() && line.back() == ',')
      fields.emplace_back();
    auto bad = [&](std::string const &why) {
      return IoError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 8)
      throw bad("expected 8 fields, got " + std::to_string(fields.size()));
    auto num = [&](std::size_t i, bool optional) {
      if (fields[i].empty())
      {
        if (optional)
          return std::numeric_limits<double>::quiet_NaN();
        throw bad("field " + std::to_string(i + 1) + " is empty");
      }
      char  *end = nullptr;
      double v   = std::strtod(fields[i].c_str(), &end);
      if (end != fields[i].c_str() + fields[i].size() || !std::isfinite(v))
        throw bad("field " + std::to_string(i + 1) + " '" + fields[i] + "' is not a finite number");
      return v;
    };
    rows.push_back({num(0, false), num(1, false), num(2, true), num(3, false), num(4, false)});
    for (std::size_t i = 5; i < 8; ++i)
      num(i, false);
  }
  if (rows.empty())
    throw IoError(path.string() + ": no data rows");
  return rows;
}

// ---------------------------------------------------------------- SVG charts

struct Series
{
  std::string         name;
  std::string         color;
  std::vector<double> y;  // NaN = gap
};

inline std::string svg_number(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

/// Line chart fragment placed at (ox, oy); gaps in a series split its polyline.
inline std::string chart_body(std::string const &title, std::vector<double> const &x, std::vector<Series> const &series,
                              double ox, double oy, double width, double height)
{
  double const left = 56, right = 16, top = 28, bottom = 36;
  double       xmin = x.front(), xmax = x.back();
  if (xmax <= xmin)
  {
    xmin -= 0.5;
    xmax += 0.5;
  }
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for (auto const &s : series)
    for (double v : s.y)
      if (!std::isnan(v))
      {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
      }
  if (!std::isfinite(ymin))
  {
    ymin = 0.0;
    ymax = 1.0;
  }
  if (ymax - ymin < 1e-12)
  {
    ymin -= 0.5;
    ymax += 0.5;
  }
  double const pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double v) { return ox + left + (v - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double v) { return oy + top + (1.0 - (v - ymin) / (ymax - ymin)) * ph; };

  std::string o;
  o += "<g>\n<rect x=\"" + svg_number(ox) + "\" y=\"" + svg_number(oy) + "\" width=\"" + svg_number(width) +
       "\" height=\"" + svg_number(height) + "\" fill=\"white\"/>\n";
  o += "<text x=\"" + svg_number(ox + width / 2) + "\" y=\"" + svg_number(oy + 18) +
       "\" text-anchor=\"middle\" font-size=\"14\">" + title + "</text>\n";
  o += "<line x1=\"" + svg_number(px(xmin)) + "\" y1=\"" + svg_number(py(ymin)) + "\" x2=\"" + svg_number(px(xmax)) +
       "\" y2=\"" + svg_number(py(ymin)) + "\" stroke=\"black\"/>\n";
  o += "<line x1=\"" + svg_number(px(xmin)) + "\" y1=\"" + svg_number(py(ymin)) + "\" x2=\"" + svg_number(px(xmin)) +
       "\" y2=\"" + svg_number(py(ymax)) + "\" stroke=\"black\"/>\n";
  for (double v : {xmin, xmax})
    o += "<text x=\"" + svg_number(px(v)) + "\" y=\"" + svg_number(py(ymin) + 16) +
         "\" text-anchor=\"middle\" font-size=\"11\">" + metrics::format_real(v) + "</text>\n";
  for (double v : {ymin, ymax})
    o += "<text x=\"" + svg_number(px(xmin) - 4) + "\" y=\"" + svg_number(py(v) + 4) +
         "\" text-anchor=\"end\" font-size=\"11\">" + svg_number(v) + "</text>\n";
  o += "<text x=\"" + svg_number(ox + width / 2) + "\" y=\"" + svg_number(oy + height - 4) +
       "\" text-anchor=\"middle\" font-size=\"11\">epoch</text>\n";

  double legend_y = oy + top + 12;
  for (auto const &s : series)
  {
    std::string points;
    auto        flush = [&] {
      if (!points.empty())
        o += "<polyline class=\"" + s.name + "\" fill=\"none\" stroke=\"" + s.color + "\" points=\"" + points +
             "\"/>\n";
      points.clear();
    };
    for (std::size_t i = 0; i < x.size(); ++i)
    {
      if (std::isnan(s.y[i]))
      {
        flush();
        continue;
      }
      points += (points.empty() ? "" : " ") + svg_number(px(x[i])) + "," + svg_number(py(s.y[i]));
      o += "<circle class=\"" + s.name + "\" cx=\"" + svg_number(px(x[i])) + "\" cy=\"" + svg_number(py(s.y[i])) +
           "\" r=\"2\" fill=\"" + s.color + "\"/>\n";
    }
    flush();
    if (series.size() > 1)
    {
      o += "<text x=\"" + svg_number(ox + width - right - 4) + "\" y=\"" + svg_number(legend_y) +
           "\" text-anchor=\"end\" font-size=\"11\" fill=\"" + s.color + "\">" + s.name + "</text>\n";
      legend_y += 14;
    }
  }
  o += "</g>\n";
  return o;
}

inline std::string svg_document(double width, double height, std::string const &body)
{
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_number(width) + "\" height=\"" +
         svg_number(height) + "\" viewBox=\"0 0 " + svg_number(width) + " " + svg_number(height) + "\">\n" + body +
         "</svg>\n";
}

/// Writes loss.svg, nmi_prev.svg, nmi_labels.svg, purity.svg and metrics.svg into out.
inline std::vector<fs::path> plot_metrics(std::vector<MetricsRow> const &rows, fs::path const &out)
{
  std::vector<double> x;
  Series              loss{"loss", "#1f77b4", {}}, prev{"nmi_prev", "#ff7f0e", {}},
      labels{"nmi_labels", "#2ca02c", {}}, purity{"purity", "#d62728", {}};
  for (auto const &r : rows)
  {
    x.push_back(r.epoch);
    loss.y.push_back(r.loss);
    prev.y.push_back(r.nmi_prev);
    labels.y.push_back(r.nmi_labels);
    purity.y.push_back(r.purity);
  }
  fs::create_directories(out);
  double const          w = 480, h = 300;
  std::vector<fs::path> written;
  for (auto const *s : {&loss, &prev, &labels, &purity})
  {
    auto const path = out / (s->name + ".svg");
    write_text(path, svg_document(w, h, chart_body(s->name, x, {*s}, 0, 0, w, h)));
    written.push_back(path);
  }
  std::string combined = chart_body("loss", x, {loss}, 0, 0, w, h) +
                         chart_body("nmi", x, {prev, labels}, w, 0, w, h) +
                         chart_body("purity", x, {purity}, 0, h, w, h);
  auto const path = out / "metrics.svg";
  write_text(path, svg_document(2 * w, 2 * h, combined));
  written.push_back(path);
  return written;
}

// ---------------------------------------------------------------- commands

struct Streams
{
  std::ostream &out;
  std::ostream &err;
  bool          quiet{false};
};

inline std::vector<engine::ImageRecord> load_data(fs::path const &dir)
{
  if (dir.empty())
    throw CliError(kUsage, "no dataset given (use --data or dataset.path)");
  if (!fs::is_directory(dir))
    throw CliError(kDataError, "dataset directory " + dir.string() + " does not exist");
  try
  {
    return data::load_dataset(dir);
  }
  catch (Error const &e)
  {
    throw CliError(kDataError, e.what());
  }
}

inline Checkpoint load_ckpt(fs::path const &path)
{
  if (!fs::is_regular_file(path))
    throw CliError(kDataError, "checkpoint " + path.string() + " does not exist");
  try
  {
    return load_checkpoint(path);
  }
  catch (Error const &e)
  {
    throw CliError(kDataError, e.what());
  }
}

inline int cmd_generate(std::string const &preset, fs::path const &out, std::uint64_t seed, std::size_t size,
                        std::size_t image_size, bool force, Streams const &io)
{
  data::DatasetConfig cfg;
  try
  {
    cfg            = data::preset_config(preset, size, seed);
    cfg.image_size = image_size;
    cfg.validate();
  }
  catch (ValueError const &e)
  {
    throw CliError(kUsage, e.what());
  }
  if (non_empty_dir(out))
  {
    if (!force)
      throw CliError(kUsage, "output directory " + out.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(out / "images");
    fs::remove(out / "labels.csv");
  }
  auto const records = data::generate_dataset(cfg);
  data::write_dataset(out, records);
  if (!io.quiet)
  {
    auto const hist = data::class_histogram(records);
    io.out << "wrote " << records.size() << " images to " << out.string() << "\n";
    io.out << "class,name,count,share\n";
    for (std::size_t c = 0; c < hist.size(); ++c)
    {
      char share[32];
      std::snprintf(share, sizeof(share), "%.4f", static_cast<double>(hist[c]) / static_cast<double>(records.size()));
      io.out << c << ',' << data::kClassNames[static_cast<std::size_t>(cfg.families[c])] << ',' << hist[c] << ','
             << share << "\n";
    }
  }
  return kOk;
}

inline int cmd_train(TrainSettings const &s, fs::path const &out, std::optional<fs::path> const &resume,
                     Streams const &io)
{
  try
  {
    s.run.validate();
    s.augment.validate();
    nn::feature_specs(s.run.arch);
  }
  catch (ValueError const &e)
  {
    throw CliError(kUsage, e.what());
  }
  auto records = load_data(s.data_path);
  fs::create_directories(out);
  write_text(out / "effective_config.json", to_json(s).dump(2) + "\n");

  engine::RunOptions opts;
  opts.out_dir = out;
  if (resume)
  {
    if (!fs::is_regular_file(*resume))
      throw CliError(kDataError, "checkpoint " + resume->string() + " does not exist");
    opts.resume_from = *resume;
  }
  if (!io.quiet)
  {
    opts.on_epoch = [&](metrics::EpochMetrics const &m, engine::RunState const &) {
      char line[160];
      std::snprintf(line, sizeof(line), "epoch %zu  loss %.4f  nmi_prev %s  nmi_labels %.4f  purity %.4f\n",
                    m.epoch, m.loss, m.nmi_prev ? metrics::format_real(*m.nmi_prev).c_str() : "-", m.nmi_labels,
                    m.purity);
      io.out << line << std::flush;
    };
  }
  try
  {
    engine::run(s.run, s.augment, std::move(records), opts);
  }
  catch (FormatError const &e)
  {
    throw CliError(kDataError, e.what());
  }
  catch (StageError const &e)
  {
    throw CliError(kRunFailure, e.what());
  }
  catch (Error const &e)
  {
    throw CliError(kRunFailure, std::string("[run] ") + e.what());
  }
  return kOk;
}

inline int cmd_evaluate(fs::path const &ckpt_path, TrainSettings const &s, std::optional<std::uint64_t> seed,
                        fs::path out, Streams const &io)
{
  auto ckpt    = load_ckpt(ckpt_path);
  auto records = load_data(s.data_path);
  if (out.empty())
    out = ckpt_path.parent_path() / ("eval_assignments_" + std::to_string(ckpt.epoch) + ".csv");
  engine::Evaluation ev;
  try
  {
    ev = engine::evaluate(ckpt, records, s.augment, seed.value_or(ckpt.run_seed), s.run.kmeans_max_iters);
  }
  catch (DimensionError const &e)
  {
    throw CliError(kDataError, e.what());
  }
  catch (Error const &e)
  {
    throw CliError(kRunFailure, e.what());
  }
  if (!out.parent_path().empty())
    fs::create_directories(out.parent_path());
  engine::write_assignments(out, records, ev.assignments);
  char line[200];
  std::snprintf(line, sizeof(line), "nmi_labels %.6f\npurity %.6f\n", ev.nmi_labels, ev.purity);
  io.out << line;
  if (ev.nmi_prev)
    io.out << "nmi_prev " << metrics::format_real(*ev.nmi_prev) << "\n";
  if (!io.quiet)
    io.out << "assignments written to " << out.string() << "\n";
  return kOk;
}

inline int cmd_export(fs::path const &ckpt_path, fs::path const &data_dir, fs::path const &out, Streams const &io)
{
  auto ckpt = load_ckpt(ckpt_path);
  if (!ckpt.prev_assignments)
    throw CliError(kDataError, "checkpoint " + ckpt_path.string() + " holds no assignments (epoch 0)");
  auto records = load_data(data_dir);
  if (records.size() != ckpt.prev_assignments->size())
    throw CliError(kDataError, "checkpoint holds " + std::to_string(ckpt.prev_assignments->size()) +
                                   " assignments but the dataset has " + std::to_string(records.size()) + " images");
  if (!out.parent_path().empty())
    fs::create_directories(out.parent_path());
  engine::write_assignments(out, records, *ckpt.prev_assignments);
  if (!io.quiet)
    io.out << "wrote " << records.size() << " assignments to " << out.string() << "\n";
  return kOk;
}

inline int cmd_plot(fs::path const &metrics_path, fs::path const &out, Streams const &io)
{
  std::vector<MetricsRow> rows;
  try
  {
    rows = read_metrics_csv(metrics_path);
  }
  catch (IoError const &e)
  {
    throw CliError(kDataError, e.what());
  }
  auto const written = plot_metrics(rows, out);
  if (!io.quiet)
    for (auto const &p : written)
      io.out << "wrote " << p.string() << "\n";
  return kOk;
}

/// Parses arguments and runs one command; returns the process exit code.
inline int run_cli(std::vector<std::string> args, std::ostream &out = std::cout, std::ostream &err = std::cerr)
{
  CLI::App app{"Unsupervised image clustering by alternating k-means and classifier training", "deepclust"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::optional<std::uint64_t> seed;
  bool                         force = false, quiet = false;
  app.add_option("--seed", seed, "Root random seed");
  app.add_flag("--force", force, "Overwrite existing outputs");
  app.add_flag("--quiet", quiet, "Only print results and errors");

  auto *gen = app.add_subcommand("generate", "Write a synthetic dataset (images/ + labels.csv)");
  std::string preset = "balanced3";
  fs::path    gen_out;
  std::size_t gen_size = 0, image_size = 32;
  gen->add_option("--preset", preset, "balanced3, imbalanced13-large or imbalanced13-small")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--size", gen_size, "Total image count (0: preset default)");
  gen->add_option("--image-size", image_size, "Image side in pixels")->capture_default_str();

  auto *train = app.add_subcommand("train", "Run the clustering/training loop");
  std::optional<fs::path> config_path, resume, data_dir;
  fs::path                train_out;
  std::optional<std::size_t> epochs, batch, factor, k, classes, ckpt_every, kmeans_iters, epoch_size;
  std::optional<double>      lr, momentum, wd;
  std::optional<std::string> arch;
  bool                       export_assign = false;
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--data", data_dir, "Dataset directory");
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--epochs", epochs, "Number of epochs");
  train->add_option("--batch-size", batch, "Minibatch size");
  train->add_option("--lr", lr, "Learning rate");
  train->add_option("--momentum", momentum, "SGD momentum");
  train->add_option("--weight-decay", wd, "Weight decay");
  train->add_option("--factor", factor, "Over-segmentation factor (k = factor * classes)");
  train->add_option("--classes", classes, "Estimated class count");
  train->add_option("--k", k, "Cluster count (overrides factor * classes)");
  train->add_option("--checkpoint-every", ckpt_every, "Checkpoint period in epochs (0: final only)");
  train->add_option("--kmeans-iters", kmeans_iters, "Lloyd iterations per clustering");
  train->add_option("--epoch-size", epoch_size, "Sampler draws per epoch (0: dataset size)");
  train->add_option("--arch", arch, "Network preset: mini or vgg16bn");
  train->add_flag("--export-assignments", export_assign, "Write assignments_<epoch>.csv every epoch");

  auto *eval = app.add_subcommand("evaluate", "Cluster a dataset with a trained checkpoint and score it");
  fs::path                eval_ckpt, eval_out;
  std::optional<fs::path> eval_data, eval_config;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory");
  eval->add_option("--config", eval_config, "Config file (augment and run sections are used)");
  eval->add_option("--out", eval_out, "Assignments CSV path");

  auto *exp = app.add_subcommand("export", "Write a checkpoint's cluster assignments as CSV");
  fs::path exp_ckpt, exp_data, exp_out;
  exp->add_option("--checkpoint", exp_ckpt, "Checkpoint file")->required();
  exp->add_option("--data", exp_data, "Dataset directory (for image ids)")->required();
  exp->add_option("--out", exp_out, "CSV path")->required();

  auto *plot = app.add_subcommand("plot", "Render metrics.csv as SVG line charts");
  fs::path plot_metrics_path, plot_out;
  plot->add_option("--metrics", plot_metrics_path, "metrics.csv")->required();
  plot->add_option("--out", plot_out, "Output directory")->required();

  for (auto *sub : {gen, train, eval, exp, plot})
    sub->fallthrough();

  std::reverse(args.begin(), args.end());
  try
  {
    app.parse(args);
  }
  catch (CLI::CallForHelp const &e)
  {
    return app.exit(e, out, err);
  }
  catch (CLI::CallForAllHelp const &e)
  {
    return app.exit(e, out, err);
  }
  catch (CLI::ParseError const &e)
  {
    app.exit(e, out, err);
    return kUsage;
  }

  Streams io{out, err, quiet};
  try
  {
    if (*gen)
      return cmd_generate(preset, gen_out, seed.value_or(0), gen_size, image_size, force, io);

    if (*train || *eval)
    {
      TrainSettings s;
      auto const   &cfg_file = *train ? config_path : eval_config;
      if (cfg_file)
        apply_config(read_json_file(*cfg_file), s);
      auto const &data_flag = *train ? data_dir : eval_data;
      if (data_flag)
        s.data_path = data_flag->string();
      if (*eval)
        return cmd_evaluate(eval_ckpt, s, seed, eval_out, io);

      if (seed)
        s.run.seed = *seed;
      if (epochs)
        s.run.epochs = *epochs;
      if (batch)
        s.run.batch_size = *batch;
      if (lr)
        s.run.sgd.learning_rate = *lr;
      if (momentum)
        s.run.sgd.momentum = *momentum;
      if (wd)
        s.run.sgd.weight_decay = *wd;
      if (factor)
        s.run.oversegmentation_factor = *factor;
      if (classes)
        s.run.num_classes_hint = *classes;
      if (k)
        s.run.k_override = *k;
      if (ckpt_every)
        s.run.checkpoint_every = *ckpt_every;
      if (kmeans_iters)
        s.run.kmeans_max_iters = *kmeans_iters;
      if (epoch_size)
        s.run.epoch_size = *epoch_size;
      if (arch)
        s.run.arch.preset = *arch;
      if (export_assign)
        s.run.export_assignments = true;
      return cmd_train(s, train_out, resume, io);
    }
    if (*exp)
      return cmd_export(exp_ckpt, exp_data, exp_out, io);
    if (*plot)
      return cmd_plot(plot_metrics_path, plot_out, io);
  }
  catch (CliError const &e)
  {
    err << "error: " << e.what() << "\n";
    return e.code();
  }
  catch (std::exception const &e)
  {
    err << "error: " << e.what() << "\n";
    return kRunFailure;
  }
  return kUsage;
}

inline int run_cli(int argc, char const *const *argv, std::ostream &out = std::cout, std::ostream &err = std::cerr)
{
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i)
    args.emplace_back(argv[i]);
  return run_cli(std::move(args), out, err);
}

}  // namespace deepclust::cli
