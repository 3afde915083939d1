#include "fedssl/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "fedssl/errors.hpp"
#include "fedssl/rng.hpp"

namespace fedssl {

const std::vector<std::string>& nslkdd_protocols() {
  static const std::vector<std::string> v = {"tcp", "udp", "icmp"};
  return v;
}

const std::vector<std::string>& nslkdd_services() {
  static const std::vector<std::string> v = {
      "aol",       "auth",      "bgp",        "courier",    "csnet_ns",    "ctf",         "daytime",  "discard",
      "domain",    "domain_u",  "echo",       "eco_i",      "ecr_i",       "efs",         "exec",     "finger",
      "ftp",       "ftp_data",  "gopher",     "harvest",    "hostnames",   "http",        "http_2784", "http_443",
      "http_8001", "imap4",     "IRC",        "iso_tsap",   "klogin",      "kshell",      "ldap",     "link",
      "login",     "mtp",       "name",       "netbios_dgm", "netbios_ns", "netbios_ssn", "netstat",  "nnsp",
      "nntp",      "ntp_u",     "other",      "pm_dump",    "pop_2",       "pop_3",       "printer",  "private",
      "red_i",     "remote_job", "rje",       "shell",      "smtp",        "sql_net",     "ssh",      "sunrpc",
      "supdup",    "systat",    "telnet",     "tftp_u",     "tim_i",       "time",        "urh_i",    "urp_i",
      "uucp",      "uucp_path", "vmnet",      "whois",      "X11",         "Z39_50"};
  return v;
}

const std::vector<std::string>& nslkdd_flags() {
  static const std::vector<std::string> v = {"OTH", "REJ", "RSTO", "RSTOS0", "RSTR", "S0",
                                             "S1",  "S2",  "S3",   "SF",     "SH"};
  return v;
}

SyntheticConfig SyntheticConfig::scaled(std::size_t train_total, std::size_t test_total, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.seed = seed;
  auto scale = [](std::array<std::size_t, kNumClasses>& counts, std::size_t total) {
    const double sum = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    for (auto& c : counts) {
      c = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(c) * total / sum)));
    }
    auto& largest = *std::max_element(counts.begin(), counts.end());
    const auto now = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    largest = largest + total - now;
  };
  scale(cfg.train_counts, train_total);
  scale(cfg.test_counts, test_total);
  return cfg;
}

namespace {

// Attack names per class; the second list only appears in the test split,
// mirroring the unseen attacks of the real test file.
struct ClassLabels {
  std::vector<std::string> train;
  std::vector<std::string> test_only;
};

const std::array<ClassLabels, kNumClasses>& class_labels() {
  static const std::array<ClassLabels, kNumClasses> labels = {{
      {{"normal"}, {}},
      {{"neptune", "smurf", "back", "teardrop", "pod", "land"}, {"apache2", "mailbomb", "processtable", "udpstorm"}},
      {{"satan", "ipsweep", "portsweep", "nmap"}, {"mscan", "saint"}},
      {{"warezclient", "guess_passwd", "warezmaster", "imap", "ftp_write", "multihop", "phf", "spy"},
       {"snmpgetattack", "snmpguess", "httptunnel", "named", "sendmail", "xlock", "xsnoop", "worm"}},
      {{"buffer_overflow", "rootkit", "loadmodule", "perl"}, {"ps", "sqlattack", "xterm"}},
  }};
  return labels;
}

// Numeric column kinds: counts/bytes on a log scale, rates in [0, 1] and a
// few binary indicators.
enum class Kind { log_count, rate, binary };

Kind column_kind(std::size_t f) {
  // numeric index 0 is duration, 1..37 map to raw columns 4..40
  const std::size_t raw = f == 0 ? 0 : f + 3;
  switch (raw) {
    case 6:   // land
    case 11:  // logged_in
    case 13:  // root_shell
    case 20:  // is_host_login
    case 21:  // is_guest_login
      return Kind::binary;
    default:
      break;
  }
  if (raw >= 24 && raw <= 30) return Kind::rate;
  if (raw >= 33) return Kind::rate;
  return Kind::log_count;
}

struct Prototype {
  std::array<double, kNumericFeatureCount> mean{};
  std::vector<double> protocol_w;
  std::vector<double> service_w;
  std::vector<double> flag_w;
};

std::vector<double> peaked_weights(std::size_t n, std::size_t peaks, Rng& rng) {
  std::vector<double> w(n, 0.05);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> mass(1.0, 6.0);
  for (std::size_t i = 0; i < peaks; ++i) w[pick(rng)] += mass(rng);
  return w;
}

Prototype make_prototype(Rng& rng) {
  Prototype p;
  std::normal_distribution<double> z(0.0, 1.0);
  for (auto& m : p.mean) m = z(rng);
  p.protocol_w = peaked_weights(nslkdd_protocols().size(), 1, rng);
  p.service_w = peaked_weights(nslkdd_services().size(), 4, rng);
  p.flag_w = peaked_weights(nslkdd_flags().size(), 2, rng);
  return p;
}

Prototype shifted(const Prototype& base, double amount, Rng& rng) {
  Prototype p = base;
  std::normal_distribution<double> z(0.0, amount);
  for (auto& m : p.mean) m += z(rng);
  return p;
}

double to_raw(Kind kind, double latent, Rng& rng) {
  switch (kind) {
    case Kind::binary:
      return std::bernoulli_distribution(1.0 / (1.0 + std::exp(-3.0 * latent)))(rng) ? 1.0 : 0.0;
    case Kind::rate: {
      const double r = 1.0 / (1.0 + std::exp(-2.0 * latent));
      return std::round(r * 100.0) / 100.0;
    }
    case Kind::log_count:
      break;
  }
  return std::floor(std::exp(std::max(0.0, 2.0 * latent + 2.0)) - 1.0);
}

RawRecord sample(const Prototype& proto, TrafficClass cls, const std::string& label, double spread, Rng& rng) {
  RawRecord r;
  std::normal_distribution<double> noise(0.0, spread);
  for (std::size_t f = 0; f < kNumericFeatureCount; ++f) {
    r.numeric[f] = to_raw(column_kind(f), proto.mean[f] + noise(rng), rng);
  }
  auto draw = [&rng](const std::vector<std::string>& values, const std::vector<double>& w) {
    std::discrete_distribution<std::size_t> d(w.begin(), w.end());
    return values[d(rng)];
  };
  r.categorical[0] = draw(nslkdd_protocols(), proto.protocol_w);
  r.categorical[1] = draw(nslkdd_services(), proto.service_w);
  r.categorical[2] = draw(nslkdd_flags(), proto.flag_w);
  r.label = label;
  r.cls = cls;
  r.difficulty = std::uniform_int_distribution<int>(0, 21)(rng);
  return r;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticConfig& cfg) {
  const std::size_t train_total = std::accumulate(cfg.train_counts.begin(), cfg.train_counts.end(), std::size_t{0});
  if (train_total < nslkdd_services().size()) {
    throw ConfigError("synthetic train split needs at least " + std::to_string(nslkdd_services().size()) + " records");
  }
  if (!(cfg.spread > 0.0) || cfg.test_shift < 0.0) throw ConfigError("synthetic spread must be positive");

  Rng rng = make_rng(cfg.seed, {0x5f17});
  // Several sub-prototypes per class give multi-modal classes; minority
  // classes sit closer to Normal, which makes them hard like the real data.
  std::array<std::vector<Prototype>, kNumClasses> train_protos;
  std::array<std::vector<Prototype>, kNumClasses> test_protos;
  for (int c = 0; c < kNumClasses; ++c) {
    for (int m = 0; m < 3; ++m) train_protos[c].push_back(make_prototype(rng));
  }
  for (int c = 3; c < kNumClasses; ++c) {
    for (std::size_t m = 0; m < train_protos[c].size(); ++m) {
      const auto& normal = train_protos[0][m];
      for (std::size_t f = 0; f < kNumericFeatureCount; ++f) {
        train_protos[c][m].mean[f] = 0.55 * normal.mean[f] + 0.45 * train_protos[c][m].mean[f];
      }
    }
  }
  for (int c = 0; c < kNumClasses; ++c) {
    for (const auto& p : train_protos[c]) test_protos[c].push_back(shifted(p, cfg.test_shift, rng));
  }

  SyntheticData out;
  auto fill = [&](std::vector<RawRecord>& dst, const std::array<std::size_t, kNumClasses>& counts,
                  const std::array<std::vector<Prototype>, kNumClasses>& protos, bool test) {
    for (int c = 0; c < kNumClasses; ++c) {
      const auto& names = class_labels()[c];
      for (std::size_t i = 0; i < counts[c]; ++i) {
        const auto& proto = protos[c][i % protos[c].size()];
        const bool unseen = test && !names.test_only.empty() && i % 3 == 2;
        const auto& pool = unseen ? names.test_only : names.train;
        dst.push_back(sample(proto, static_cast<TrafficClass>(c), pool[i % pool.size()], cfg.spread, rng));
      }
    }
    std::shuffle(dst.begin(), dst.end(), rng);
  };
  fill(out.train, cfg.train_counts, train_protos, false);
  fill(out.test, cfg.test_counts, test_protos, true);

  // Every category value must occur in training so the encoded width is fixed.
  for (std::size_t i = 0; i < nslkdd_services().size(); ++i) {
    auto& r = out.train[i];
    r.categorical[1] = nslkdd_services()[i];
    r.categorical[0] = nslkdd_protocols()[i % nslkdd_protocols().size()];
    r.categorical[2] = nslkdd_flags()[i % nslkdd_flags().size()];
  }
  return out;
}

void write_nslkdd_file(const std::filesystem::path& path, const std::vector<RawRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (const auto& r : records) {
    out << num(r.numeric[0]) << ',' << r.categorical[0] << ',' << r.categorical[1] << ',' << r.categorical[2];
    for (std::size_t f = 1; f < kNumericFeatureCount; ++f) out << ',' << num(r.numeric[f]);
    out << ',' << r.label << ',' << r.difficulty << '\n';
  }
}

}  // namespace fedssl
