#include "gudrl/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace gudrl::cli {

namespace {

std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size() || s[0] == '-') throw std::invalid_argument(what + ": not a count: '" + s + "'");
    return v;
}

double to_real(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw std::invalid_argument(what + ": not a number: '" + s + "'");
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
    std::vector<std::uint64_t> out;
    const auto dots = spec.find("..");
    if (dots != std::string::npos) {
        const auto lo = to_u64(spec.substr(0, dots), "--seeds");
        const auto hi = to_u64(spec.substr(dots + 2), "--seeds");
        if (hi < lo) throw std::invalid_argument("--seeds: empty range '" + spec + "'");
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
        return out;
    }
    for (const auto& part : split(spec, ',')) out.push_back(to_u64(trim(part), "--seeds"));
    if (out.empty()) throw std::invalid_argument("--seeds: no seeds given");
    return out;
}

std::string write_config(const RunConfig& c, std::uint64_t seed) {
    const auto& s = c.setting;
    const auto& p = s.policy;
    std::ostringstream os;
    os << "setting = " << agent::setting_name(s.setting) << '\n'
       << "seed = " << seed << '\n'
       << "dataset = " << c.dataset << '\n'
       << "env_steps = " << s.env_steps << '\n'
       << "train_steps = " << s.train_steps << '\n'
       << "eval_every = " << s.eval_every << '\n'
       << "eval_episodes = " << s.eval_episodes << '\n'
       << "eval_mode = " << (s.eval_mode == policy::ActMode::greedy ? "greedy" : "sample") << '\n'
       << "warmup_episodes = " << s.warmup_episodes << '\n'
       << "capacity = " << s.capacity << '\n'
       << "top_k = " << s.top_k << '\n'
       << "batch_size = " << s.batch_size << '\n'
       << "max_length = " << s.max_length << '\n'
       << "train_every = " << s.train_every << '\n'
       << "steps_per_round = " << s.steps_per_round << '\n'
       << "learning_rate = " << real(s.learning_rate) << '\n'
       << "final_lr_fraction = " << real(s.final_lr_fraction) << '\n'
       << "clip_norm = " << real(s.clip_norm) << '\n'
       << "embed_dim = " << p.embed_dim << '\n'
       << "encoding_dim = " << p.encoding_dim << '\n'
       << "heads = " << p.heads << '\n'
       << "ff_dim = " << p.ff_dim << '\n'
       << "obs_features = " << p.obs_features << '\n'
       << "lstm_hidden = " << p.lstm_hidden << '\n'
       << "command_scale = " << real(p.command_scale) << '\n';
    return os.str();
}

RunConfig read_config(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    RunConfig c;
    c.subcommand = "train";
    if (auto it = kv.find("setting"); it != kv.end()) {
        auto s = agent::parse_setting(it->second);
        if (!s) throw std::invalid_argument("config: unknown setting '" + it->second + "'");
        c.setting = agent::SettingConfig::defaults(*s);
        kv.erase(it);
    }
    auto& s = c.setting;
    auto& p = s.policy;
    for (const auto& [key, value] : kv) {
        const std::string what = "config " + key;
        auto count = [&] { return static_cast<std::size_t>(to_u64(value, what)); };
        if (key == "seed") c.seeds = {to_u64(value, what)};
        else if (key == "dataset") c.dataset = value;
        else if (key == "env_steps") s.env_steps = count();
        else if (key == "train_steps") s.train_steps = count();
        else if (key == "eval_every") s.eval_every = count();
        else if (key == "eval_episodes") s.eval_episodes = count();
        else if (key == "eval_mode") {
            if (value != "greedy" && value != "sample") throw std::invalid_argument(what + ": '" + value + "'");
            s.eval_mode = value == "greedy" ? policy::ActMode::greedy : policy::ActMode::sample;
        } else if (key == "warmup_episodes") s.warmup_episodes = count();
        else if (key == "capacity") s.capacity = count();
        else if (key == "top_k") s.top_k = count();
        else if (key == "batch_size") s.batch_size = count();
        else if (key == "max_length") s.max_length = count();
        else if (key == "train_every") s.train_every = count();
        else if (key == "steps_per_round") s.steps_per_round = count();
        else if (key == "learning_rate") s.learning_rate = to_real(value, what);
        else if (key == "final_lr_fraction") s.final_lr_fraction = to_real(value, what);
        else if (key == "clip_norm") s.clip_norm = to_real(value, what);
        else if (key == "embed_dim") p.embed_dim = count();
        else if (key == "encoding_dim") p.encoding_dim = count();
        else if (key == "heads") p.heads = count();
        else if (key == "ff_dim") p.ff_dim = count();
        else if (key == "obs_features") p.obs_features = count();
        else if (key == "lstm_hidden") p.lstm_hidden = count();
        else if (key == "command_scale") p.command_scale = to_real(value, what);
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    return c;
}

std::vector<CurvePoint> curve_points(const std::vector<agent::EvalReport>& reports, std::uint64_t seed) {
    std::vector<CurvePoint> out;
    for (const auto& r : reports)
        for (const auto& c : r.conditions) out.push_back({r.progress, c.label, c.mean, c.std, seed});
    return out;
}

std::string format_curve(const std::vector<CurvePoint>& points) {
    std::ostringstream os;
    os << "progress,condition,mean_return,std_return,seed\n";
    for (const auto& p : points)
        os << p.progress << ',' << p.condition << ',' << real(p.mean_return) << ',' << real(p.std_return) << ','
           << p.seed << '\n';
    return os.str();
}

std::vector<CurvePoint> parse_curve(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::vector<CurvePoint> out;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) {
            if (line != "progress,condition,mean_return,std_return,seed")
                throw CurveError("curve line 1: unexpected header '" + line + "'");
            continue;
        }
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 5)
            throw CurveError("curve line " + std::to_string(lineno) + ": expected 5 fields, got " +
                             std::to_string(f.size()));
        try {
            out.push_back({static_cast<std::size_t>(to_u64(f[0], "progress")), f[1], to_real(f[2], "mean_return"),
                           to_real(f[3], "std_return"), to_u64(f[4], "seed")});
        } catch (const std::invalid_argument& e) {
            throw CurveError("curve line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (lineno == 0) throw CurveError("curve line 1: missing header");
    return out;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                          "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39",
                          "#7b4173", "#3182bd", "#e6550d", "#31a354", "#756bb1", "#636363", "#9c9ede",
                          "#cedb9c", "#e7cb94", "#e7969c", "#de9ed6", "#6baed6", "#fd8d3c"};

std::string escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += ch;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

struct Series {
    std::string label;
    std::vector<double> x, mean, lo, hi;
    bool band = false;
};

}  // namespace

std::string render_plot(const std::vector<CurvePoint>& points, const PlotOptions& options) {
    if (points.empty()) throw std::invalid_argument("plot: no curve points");

    // condition -> progress -> per-seed means, conditions in first-seen order.
    std::vector<std::string> order;
    std::map<std::string, std::map<std::size_t, std::vector<double>>> grouped;
    for (const auto& p : points) {
        if (!grouped.count(p.condition)) order.push_back(p.condition);
        grouped[p.condition][p.progress].push_back(p.mean_return);
    }
    std::vector<Series> series;
    double x_max = 1, y_max = 1;
    for (const auto& label : order) {
        Series s;
        s.label = label;
        for (const auto& [x, vals] : grouped[label]) {
            double m = 0;
            for (double v : vals) m += v;
            m /= static_cast<double>(vals.size());
            double sd = 0;
            if (vals.size() > 1) {
                for (double v : vals) sd += (v - m) * (v - m);
                sd = std::sqrt(sd / static_cast<double>(vals.size() - 1));
                s.band = true;
            }
            s.x.push_back(static_cast<double>(x));
            s.mean.push_back(m);
            s.lo.push_back(m - sd);
            s.hi.push_back(m + sd);
            x_max = std::max(x_max, static_cast<double>(x));
            y_max = std::max(y_max, m + sd);
        }
        series.push_back(std::move(s));
    }
    if (options.dataset_mean) y_max = std::max(y_max, *options.dataset_mean);
    y_max = std::max(y_max, 1.0) * 1.05;

    const double W = 760, H = 440, left = 70, right = series.size() > 1 ? 230 : 30, top = 40, bottom = 60;
    const double pw = W - left - right, ph = H - top - bottom;
    auto sx = [&](double x) { return left + pw * x / x_max; };
    auto sy = [&](double y) { return top + ph * (1.0 - std::clamp(y, 0.0, y_max) / y_max); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
       << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << num(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
       << escape(options.title) << "</text>\n";
    // Axes and ticks.
    os << "<g stroke=\"#333\" stroke-width=\"1\">\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
       << "\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\"/>\n";
    os << "</g>\n";
    for (int i = 0; i <= 5; ++i) {
        const double yv = y_max * i / 5.0, xv = x_max * i / 5.0;
        os << "<line x1=\"" << left - 4 << "\" y1=\"" << num(sy(yv)) << "\" x2=\"" << left << "\" y2=\""
           << num(sy(yv)) << "\" stroke=\"#333\"/>";
        os << "<text x=\"" << left - 8 << "\" y=\"" << num(sy(yv) + 4) << "\" text-anchor=\"end\">"
           << static_cast<long>(std::lround(yv)) << "</text>\n";
        os << "<line x1=\"" << num(sx(xv)) << "\" y1=\"" << top + ph << "\" x2=\"" << num(sx(xv)) << "\" y2=\""
           << top + ph + 4 << "\" stroke=\"#333\"/>";
        os << "<text x=\"" << num(sx(xv)) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
           << static_cast<long>(std::lround(xv)) << "</text>\n";
    }
    os << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">"
       << escape(options.x_label) << "</text>\n";
    os << "<text transform=\"translate(18," << num(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
       << "return</text>\n";

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* colour = kPalette[k % std::size(kPalette)];
        if (s.band) {
            os << "<polygon fill=\"" << colour << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
            for (std::size_t i = 0; i < s.x.size(); ++i) os << num(sx(s.x[i])) << ',' << num(sy(s.hi[i])) << ' ';
            for (std::size_t i = s.x.size(); i-- > 0;) os << num(sx(s.x[i])) << ',' << num(sy(s.lo[i])) << ' ';
            os << "\"/>\n";
        }
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.8\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) os << num(sx(s.x[i])) << ',' << num(sy(s.mean[i])) << ' ';
        os << "\"><title>" << escape(s.label) << "</title></polyline>\n";
        if (series.size() > 1) {
            const double ly = top + 6 + 14.0 * static_cast<double>(k);
            os << "<line x1=\"" << left + pw + 14 << "\" y1=\"" << num(ly) << "\" x2=\"" << left + pw + 34
               << "\" y2=\"" << num(ly) << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>";
            os << "<text x=\"" << left + pw + 40 << "\" y=\"" << num(ly + 4) << "\" font-size=\"10\">"
               << escape(s.label) << "</text>\n";
        }
    }
    if (options.dataset_mean) {
        os << "<line class=\"dataset-mean\" x1=\"" << left << "\" y1=\"" << num(sy(*options.dataset_mean))
           << "\" x2=\"" << left + pw << "\" y2=\"" << num(sy(*options.dataset_mean))
           << "\" stroke=\"#444\" stroke-width=\"1.5\" stroke-dasharray=\"6,4\"><title>dataset mean return "
           << num(*options.dataset_mean) << "</title></line>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace gudrl::cli
