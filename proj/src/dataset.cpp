#include "mmvae/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mmvae/errors.hpp"

namespace mmvae {

using nlohmann::json;

namespace {

constexpr const char* kMagic = "# mmvae dataset v1";

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct LineError {
  int line;
  std::string message;
};

[[noreturn]] void fail(int line, const std::string& msg) {
  throw IngestionError("line " + std::to_string(line) + ": " + msg);
}

double parse_double(const std::string& raw, int line, const std::string& what) {
  const std::string s = trim(raw);
  if (s.empty() || s == "NA") fail(line, "missing value for " + what);
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) fail(line, "cannot parse number '" + s + "' for " + what);
  return v;
}

int parse_int(const std::string& raw, int line, const std::string& what) {
  const std::string s = trim(raw);
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    fail(line, "cannot parse integer '" + s + "' for " + what);
  return v;
}

void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(",|: \t\n") != std::string::npos)
    throw IngestionError(std::string(what) + " '" + s + "' is empty or contains a reserved character");
}

}  // namespace

int Dataset::instrument_index(const std::string& id) const {
  for (std::size_t k = 0; k < instruments.size(); ++k)
    if (instruments[k].id == id) return static_cast<int>(k);
  return -1;
}

std::size_t Dataset::visit_count() const {
  std::size_t n = 0;
  for (const auto& p : patients) n += p.visits.size();
  return n;
}

std::size_t Dataset::observation_count() const {
  std::size_t n = 0;
  for (const auto& p : patients)
    for (const auto& v : p.visits) n += v.observations.size();
  return n;
}

void Dataset::validate() const {
  for (const auto& s : instruments) {
    try {
      s.validate();
    } catch (const ValidationError& e) {
      throw IngestionError(e.what());
    }
  }
  std::set<std::string> ids;
  for (const auto& p : patients) {
    if (!ids.insert(p.id).second) throw IngestionError("duplicate patient id '" + p.id + "'");
    if (p.static_covariates.size() != static_covariates.size())
      throw IngestionError("patient " + p.id + ": static covariate count mismatch");
    for (std::size_t c = 0; c < p.static_covariates.size(); ++c)
      if (!std::isfinite(p.static_covariates[c]))
        throw IngestionError("patient " + p.id + ": missing covariate '" + static_covariates[c] + "'");
    for (std::size_t s = 1; s < p.switches.size(); ++s)
      if (!(p.switches[s].time > p.switches[s - 1].time))
        throw IngestionError("patient " + p.id + ": switches not in ascending order");
    for (std::size_t v = 0; v < p.visits.size(); ++v) {
      const auto& visit = p.visits[v];
      if (v > 0 && !(visit.time > p.visits[v - 1].time))
        throw IngestionError("patient " + p.id + ": visits not strictly ascending");
      if (visit.covariates.size() != visit_covariates.size())
        throw IngestionError("patient " + p.id + ": visit covariate count mismatch");
      for (std::size_t c = 0; c < visit.covariates.size(); ++c)
        if (!std::isfinite(visit.covariates[c]))
          throw IngestionError("patient " + p.id + ": missing covariate '" + visit_covariates[c] + "' at time " +
                               format_number(visit.time));
      std::set<int> seen;
      for (const auto& o : visit.observations) {
        if (o.instrument < 0 || o.instrument >= static_cast<int>(instruments.size()))
          throw IngestionError("patient " + p.id + ": unknown instrument index");
        if (!seen.insert(o.instrument).second)
          throw IngestionError("patient " + p.id + ": instrument repeated within one visit");
        const auto& schema = instruments[static_cast<std::size_t>(o.instrument)];
        if (static_cast<int>(o.responses.levels.size()) != schema.item_count() ||
            static_cast<int>(o.responses.cannot_perform.size()) != schema.item_count())
          throw IngestionError("patient " + p.id + ": item count mismatch for '" + schema.id + "'");
        for (int k = 0; k < schema.item_count(); ++k) {
          const int level = o.responses.levels[static_cast<std::size_t>(k)];
          if (level < -1 || level >= schema.items[static_cast<std::size_t>(k)].levels)
            throw IngestionError("patient " + p.id + ": level " + std::to_string(level) + " out of range for '" +
                                 schema.id + "' item " + std::to_string(k));
        }
      }
    }
  }
}

Dataset apply_cohort_filters(const Dataset& data, const CohortRules& rules, FilterReport* report) {
  FilterReport rep;
  rep.patients_in = static_cast<int>(data.patients.size());
  Dataset out = data;
  out.patients.clear();
  std::vector<PatientRecord> kept;
  for (const auto& src : data.patients) {
    PatientRecord p = src;
    p.visits.clear();
    if (rules.truncate_after_second_switch && src.switches.size() >= 2) {
      p.switches.resize(1);
    }
    const double cutoff = (rules.truncate_after_second_switch && src.switches.size() >= 2)
                              ? src.switches[1].time
                              : std::numeric_limits<double>::infinity();
    for (const auto& v : src.visits) {
      if (v.time >= cutoff) {
        ++rep.visits_after_second_switch;
        continue;
      }
      Visit kv = v;
      kv.observations.clear();
      for (const auto& o : v.observations) {
        const double frac = static_cast<double>(o.responses.missing_count()) /
                            static_cast<double>(std::max<std::size_t>(1, o.responses.levels.size()));
        if (frac > rules.max_missing_fraction) {
          ++rep.observations_excessive_missing;
          continue;
        }
        kv.observations.push_back(o);
      }
      if (kv.observations.empty()) {
        ++rep.visits_without_observations;
        continue;
      }
      p.visits.push_back(std::move(kv));
    }
    if (!p.has_switch()) {
      if (rules.require_switch) {
        ++rep.patients_without_switch;
        continue;
      }
    } else if (!p.visits.empty()) {
      const double ts = p.switch_time();
      const double pre_years = ts - p.visits.front().time;
      const double post_years = p.visits.back().time - ts;
      if (pre_years < rules.min_treatment_years || post_years < rules.min_treatment_years) {
        ++rep.patients_short_treatment;
        continue;
      }
    }
    int pre = 0;
    int post = 0;
    for (const auto& v : p.visits) (v.time < p.switch_time() ? pre : post)++;
    const bool enough = static_cast<int>(p.visits.size()) >= rules.min_visits &&
                        (!p.has_switch() || (pre >= rules.min_pre_switch_visits && post >= rules.min_post_switch_visits));
    if (!enough) {
      ++rep.patients_few_visits;
      continue;
    }
    kept.push_back(std::move(p));
  }
  std::map<std::string, int> per_treatment;
  for (const auto& p : kept)
    if (p.has_switch()) per_treatment[p.switch_treatment()]++;
  for (auto& p : kept) {
    if (p.has_switch() && per_treatment[p.switch_treatment()] < rules.min_patients_per_treatment) {
      ++rep.patients_rare_treatment;
      continue;
    }
    out.patients.push_back(std::move(p));
  }
  rep.patients_out = static_cast<int>(out.patients.size());
  if (report) *report = rep;
  if (out.patients.empty()) throw IngestionError("no patient remains after cohort filters");
  return out;
}

std::string format_number(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

void write_dataset_text(const Dataset& data, std::ostream& os) {
  os << kMagic << '\n';
  os << "[instruments]\ninstrument,item,levels,cannot_perform_flag,official\n";
  for (const auto& s : data.instruments) {
    check_token(s.id, "instrument id");
    for (std::size_t k = 0; k < s.items.size(); ++k)
      os << s.id << ',' << k << ',' << s.items[k].levels << ',' << (s.items[k].cannot_perform_flag ? 1 : 0) << ','
         << (s.items[k].official ? 1 : 0) << '\n';
  }
  os << "[covariates]\nname,kind\n";
  for (const auto& c : data.static_covariates) {
    check_token(c, "covariate name");
    os << c << ",static\n";
  }
  for (const auto& c : data.visit_covariates) {
    check_token(c, "covariate name");
    os << c << ",visit\n";
  }
  os << "[patients]\npatient,age_at_baseline,initial_treatment,switches";
  for (const auto& c : data.static_covariates) os << ',' << c;
  os << '\n';
  for (const auto& p : data.patients) {
    check_token(p.id, "patient id");
    os << p.id << ',' << format_number(p.age_at_baseline) << ',' << p.initial_treatment << ',';
    for (std::size_t s = 0; s < p.switches.size(); ++s) {
      check_token(p.switches[s].treatment, "treatment");
      os << (s ? "|" : "") << format_number(p.switches[s].time) << ':' << p.switches[s].treatment;
    }
    for (double v : p.static_covariates) os << ',' << format_number(v);
    os << '\n';
  }
  os << "[visits]\npatient,time";
  for (const auto& c : data.visit_covariates) os << ',' << c;
  os << '\n';
  for (const auto& p : data.patients)
    for (const auto& v : p.visits) {
      os << p.id << ',' << format_number(v.time);
      for (double c : v.covariates) os << ',' << format_number(c);
      os << '\n';
    }
  os << "[observations]\npatient,time,instrument,levels,cannot_perform\n";
  for (const auto& p : data.patients)
    for (const auto& v : p.visits)
      for (const auto& o : v.observations) {
        os << p.id << ',' << format_number(v.time) << ',' << data.instruments[static_cast<std::size_t>(o.instrument)].id
           << ',';
        for (std::size_t k = 0; k < o.responses.levels.size(); ++k) {
          if (k) os << ' ';
          if (o.responses.levels[k] < 0)
            os << "NA";
          else
            os << o.responses.levels[k];
        }
        os << ',';
        for (std::size_t k = 0; k < o.responses.cannot_perform.size(); ++k) os << (k ? " " : "") << int(o.responses.cannot_perform[k]);
        os << '\n';
      }
}

Dataset read_dataset_text(std::istream& is) {
  Dataset data;
  std::string line;
  int lineno = 0;
  if (!std::getline(is, line) || trim(line) != kMagic) throw IngestionError("line 1: missing dataset header");
  ++lineno;
  std::string section;
  bool expect_header = false;
  std::vector<std::string> header;
  std::map<std::string, std::size_t> patient_index;
  std::map<std::string, std::vector<ItemSpec>> items_by_instrument;
  std::vector<std::string> instrument_order;
  auto finish_instruments = [&] {
    if (!data.instruments.empty() || instrument_order.empty()) return;
    for (const auto& id : instrument_order) data.instruments.push_back({id, items_by_instrument[id]});
  };
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || (t[0] == '#')) continue;
    if (t.front() == '[' && t.back() == ']') {
      section = t.substr(1, t.size() - 2);
      expect_header = true;
      continue;
    }
    if (expect_header) {
      header = split(t, ',');
      expect_header = false;
      if (section == "patients" || section == "visits") {
        // Columns past the fixed prefix must match the declared covariates.
        const std::size_t fixed = section == "patients" ? 4 : 2;
        const auto& names = section == "patients" ? data.static_covariates : data.visit_covariates;
        if (header.size() != fixed + names.size()) fail(lineno, "column count does not match declared covariates");
        for (std::size_t c = 0; c < names.size(); ++c)
          if (trim(header[fixed + c]) != names[c]) fail(lineno, "unexpected covariate column '" + header[fixed + c] + "'");
      }
      continue;
    }
    const auto f = split(t, ',');
    if (section == "instruments") {
      if (f.size() != 5) fail(lineno, "instrument rows need 5 fields");
      const std::string id = trim(f[0]);
      if (!items_by_instrument.count(id)) instrument_order.push_back(id);
      auto& items = items_by_instrument[id];
      if (parse_int(f[1], lineno, "item") != static_cast<int>(items.size())) fail(lineno, "items must be listed in order");
      items.push_back({parse_int(f[2], lineno, "levels"), parse_int(f[3], lineno, "cannot_perform_flag") != 0,
                       parse_int(f[4], lineno, "official") != 0});
      if (items.back().levels < 2 || items.back().levels > 6) fail(lineno, "item levels must be within 2..6");
    } else if (section == "covariates") {
      finish_instruments();
      if (f.size() != 2) fail(lineno, "covariate rows need 2 fields");
      const std::string kind = trim(f[1]);
      if (kind == "static")
        data.static_covariates.push_back(trim(f[0]));
      else if (kind == "visit")
        data.visit_covariates.push_back(trim(f[0]));
      else
        fail(lineno, "covariate kind must be 'static' or 'visit'");
    } else if (section == "patients") {
      finish_instruments();
      if (f.size() != 4 + data.static_covariates.size()) fail(lineno, "wrong number of patient fields");
      PatientRecord p;
      p.id = trim(f[0]);
      if (patient_index.count(p.id)) fail(lineno, "duplicate patient '" + p.id + "'");
      p.age_at_baseline = parse_double(f[1], lineno, "age_at_baseline of patient " + p.id);
      p.initial_treatment = trim(f[2]);
      const std::string sw = trim(f[3]);
      if (!sw.empty())
        for (const auto& part : split(sw, '|')) {
          const auto kv = split(part, ':');
          if (kv.size() != 2) fail(lineno, "switch entries must be time:treatment");
          p.switches.push_back({parse_double(kv[0], lineno, "switch time"), trim(kv[1])});
        }
      for (std::size_t c = 0; c < data.static_covariates.size(); ++c)
        p.static_covariates.push_back(
            parse_double(f[4 + c], lineno, "covariate '" + data.static_covariates[c] + "' of patient " + p.id));
      patient_index[p.id] = data.patients.size();
      data.patients.push_back(std::move(p));
    } else if (section == "visits") {
      if (f.size() != 2 + data.visit_covariates.size()) fail(lineno, "wrong number of visit fields");
      const auto it = patient_index.find(trim(f[0]));
      if (it == patient_index.end()) fail(lineno, "visit for unknown patient '" + trim(f[0]) + "'");
      auto& p = data.patients[it->second];
      Visit v;
      v.time = parse_double(f[1], lineno, "visit time");
      for (std::size_t c = 0; c < data.visit_covariates.size(); ++c)
        v.covariates.push_back(
            parse_double(f[2 + c], lineno, "covariate '" + data.visit_covariates[c] + "' of patient " + p.id));
      p.visits.push_back(std::move(v));
    } else if (section == "observations") {
      if (f.size() != 5) fail(lineno, "observation rows need 5 fields");
      const auto it = patient_index.find(trim(f[0]));
      if (it == patient_index.end()) fail(lineno, "observation for unknown patient '" + trim(f[0]) + "'");
      auto& p = data.patients[it->second];
      const double time = parse_double(f[1], lineno, "observation time");
      auto vit = std::find_if(p.visits.begin(), p.visits.end(), [&](const Visit& v) { return v.time == time; });
      if (vit == p.visits.end()) fail(lineno, "observation refers to an undeclared visit");
      const int inst = data.instrument_index(trim(f[2]));
      if (inst < 0) fail(lineno, "unknown instrument '" + trim(f[2]) + "'");
      const auto& schema = data.instruments[static_cast<std::size_t>(inst)];
      InstrumentObservation o;
      o.instrument = inst;
      for (const auto& tok : split(trim(f[3]), ' ')) {
        if (tok == "NA") {
          o.responses.levels.push_back(-1);
        } else {
          const int level = parse_int(tok, lineno, "item level");
          const std::size_t k = o.responses.levels.size();
          if (k < schema.items.size() && (level < 0 || level >= schema.items[k].levels))
            fail(lineno, "item " + std::to_string(k) + " level " + std::to_string(level) + " out of range");
          o.responses.levels.push_back(level);
        }
      }
      for (const auto& tok : split(trim(f[4]), ' ')) o.responses.cannot_perform.push_back(parse_int(tok, lineno, "flag") != 0);
      if (static_cast<int>(o.responses.levels.size()) != schema.item_count() ||
          static_cast<int>(o.responses.cannot_perform.size()) != schema.item_count())
        fail(lineno, "item count does not match instrument '" + schema.id + "'");
      vit->observations.push_back(std::move(o));
    } else {
      fail(lineno, "data outside a known section");
    }
  }
  finish_instruments();
  for (auto& p : data.patients) {
    std::stable_sort(p.visits.begin(), p.visits.end(), [](const Visit& a, const Visit& b) { return a.time < b.time; });
    for (auto& v : p.visits)
      std::stable_sort(v.observations.begin(), v.observations.end(),
                       [](const InstrumentObservation& a, const InstrumentObservation& b) { return a.instrument < b.instrument; });
  }
  data.validate();
  return data;
}

namespace {

json to_json(const Dataset& d) {
  json j;
  j["format"] = "mmvae-dataset";
  j["version"] = 1;
  for (const auto& s : d.instruments) {
    json items = json::array();
    for (const auto& it : s.items) items.push_back({it.levels, it.cannot_perform_flag, it.official});
    j["instruments"].push_back({{"id", s.id}, {"items", items}});
  }
  j["static_covariates"] = d.static_covariates;
  j["visit_covariates"] = d.visit_covariates;
  j["patients"] = json::array();
  for (const auto& p : d.patients) {
    json jp{{"id", p.id}, {"age", p.age_at_baseline}, {"initial", p.initial_treatment}, {"static", p.static_covariates}};
    jp["switches"] = json::array();
    for (const auto& s : p.switches) jp["switches"].push_back({s.time, s.treatment});
    jp["visits"] = json::array();
    for (const auto& v : p.visits) {
      json jv{{"t", v.time}, {"cov", v.covariates}};
      jv["obs"] = json::array();
      for (const auto& o : v.observations) {
        std::vector<int> flags(o.responses.cannot_perform.begin(), o.responses.cannot_perform.end());
        jv["obs"].push_back({o.instrument, o.responses.levels, flags});
      }
      jp["visits"].push_back(std::move(jv));
    }
    j["patients"].push_back(std::move(jp));
  }
  return j;
}

Dataset from_json(const json& j) {
  if (j.value("format", "") != "mmvae-dataset" || j.value("version", 0) != 1)
    throw IngestionError("binary dataset has an unknown format or version");
  Dataset d;
  for (const auto& js : j.at("instruments")) {
    InstrumentSchema s;
    s.id = js.at("id").get<std::string>();
    for (const auto& it : js.at("items")) s.items.push_back({it[0].get<int>(), it[1].get<bool>(), it[2].get<bool>()});
    d.instruments.push_back(std::move(s));
  }
  d.static_covariates = j.at("static_covariates").get<std::vector<std::string>>();
  d.visit_covariates = j.at("visit_covariates").get<std::vector<std::string>>();
  for (const auto& jp : j.at("patients")) {
    PatientRecord p;
    p.id = jp.at("id").get<std::string>();
    p.age_at_baseline = jp.at("age").get<double>();
    p.initial_treatment = jp.at("initial").get<std::string>();
    p.static_covariates = jp.at("static").get<std::vector<double>>();
    for (const auto& s : jp.at("switches")) p.switches.push_back({s[0].get<double>(), s[1].get<std::string>()});
    for (const auto& jv : jp.at("visits")) {
      Visit v;
      v.time = jv.at("t").get<double>();
      v.covariates = jv.at("cov").get<std::vector<double>>();
      for (const auto& jo : jv.at("obs")) {
        InstrumentObservation o;
        o.instrument = jo[0].get<int>();
        o.responses.levels = jo[1].get<std::vector<int>>();
        for (int f : jo[2].get<std::vector<int>>()) o.responses.cannot_perform.push_back(static_cast<char>(f != 0));
        v.observations.push_back(std::move(o));
      }
      p.visits.push_back(std::move(v));
    }
    d.patients.push_back(std::move(p));
  }
  d.validate();
  return d;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<std::uint8_t> dataset_to_binary(const Dataset& data) { return json::to_cbor(to_json(data)); }

Dataset dataset_from_binary(const std::vector<std::uint8_t>& bytes) {
  try {
    return from_json(json::from_cbor(bytes));
  } catch (const json::exception& e) {
    throw IngestionError(std::string("corrupt binary dataset: ") + e.what());
  }
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  if (ends_with(path, ".bin")) {
    const auto bytes = dataset_to_binary(data);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  } else {
    write_dataset_text(data, os);
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open dataset '" + path + "'");
  if (ends_with(path, ".bin")) {
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return dataset_from_binary(bytes);
  }
  return read_dataset_text(is);
}

Dataset ingest(const std::string& path, const CohortRules& rules, FilterReport* report) {
  return apply_cohort_filters(load_dataset(path), rules, report);
}

}  // namespace mmvae
