#pragma once

// In-memory steering session behind the HTTP interface. Transport-free: the
// server maps each HTTP request onto Session::handle.

#include <algorithm>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "mishape/error.hpp"
#include "mishape/motion_net.hpp"
#include "mishape/perturbation.hpp"
#include "mishape/render.hpp"
#include "mishape/scene.hpp"
#include "mishape/segmentation.hpp"

namespace mishape {

struct Request {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

inline int http_status(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::no_target: return 404;
    case ErrorCategory::degenerate:
    case ErrorCategory::numeric: return 422;
    case ErrorCategory::io: return 500;
    default: return 400;
  }
}

inline Response error_response(int status, std::string_view category, const std::string& message,
                               const std::string& context, std::optional<std::uint64_t> rev = std::nullopt) {
  nlohmann::json j{{"error", {{"category", category}, {"message", message}, {"context", context}}}};
  if (rev) j["rev"] = *rev;
  return {status, j.dump(), "application/json"};
}

inline Vec3 vec3_from_json(const nlohmann::json& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != 3) fail(ErrorCategory::argument, "expected an array of three numbers", ctx);
  Vec3 v;
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_number()) fail(ErrorCategory::argument, "expected a number", ctx);
    v[i] = j[i].get<double>();
  }
  return v;
}

inline nlohmann::json vec3_to_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.position = vec3_from_json(j.at("position"), "camera.position");
  c.look_at = vec3_from_json(j.at("look_at"), "camera.look_at");
  if (j.contains("up")) c.up = vec3_from_json(j["up"], "camera.up");
  c.focal = j.value("focal", c.focal);
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  validate(c);
  return c;
}

inline nlohmann::json camera_to_json(const Camera& c) {
  return {{"position", vec3_to_json(c.position)}, {"look_at", vec3_to_json(c.look_at)}, {"up", vec3_to_json(c.up)},
          {"focal", c.focal}, {"width", c.width}, {"height", c.height}};
}

class Session {
 public:
  struct Step {
    std::uint64_t rev = 0;
    std::string kind;
    int perturbation_id = -1;
    Perturbation p;
    nlohmann::json provenance;
    double mean = 0.0, max = 0.0, leakage = 0.0;
  };

  Session(Scene scene, MotionNet net, std::optional<std::vector<int>> labels = std::nullopt)
      : canonical_scene_(std::move(scene)),
        canonical_net_(std::move(net)),
        inputs_(positions(canonical_scene_)),
        labels_(labels ? std::move(*labels) : labels_of(canonical_scene_)),
        cameras_(camera_ring(canonical_scene_)),
        scene_(canonical_scene_),
        net_(canonical_net_) {
    if (labels_.size() != canonical_scene_.size())
      fail(ErrorCategory::argument, "one label per Gaussian required", "labels");
  }

  std::uint64_t rev() const {
    std::shared_lock lock(mu_);
    return rev_;
  }

  Scene scene() const {
    std::shared_lock lock(mu_);
    return scene_;
  }

  const std::vector<Camera>& cameras() const { return cameras_; }

  Response handle(const Request& req) {
    try {
      const std::string& p = req.path;
      if (req.method == "GET") {
        if (p == "/api/scene") return get_scene(req);
        if (p == "/api/relevance") return get_relevance(req);
        if (p == "/api/trajectory") return get_trajectory();
        if (p == "/api/render") return get_render(req);
        if (p == "/api/save") return get_save();
      } else if (req.method == "POST") {
        const nlohmann::json body = parse_body(req.body);
        if (p == "/api/prompt") return post_prompt(body);
        if (p == "/api/perturb") return mutate(body, [&] { return apply_new(body); });
        if (p == "/api/compose") return mutate(body, [&] { return apply_compose(body); });
        if (p == "/api/twist") return mutate(body, [&] { return apply_twist(body); });
        if (p == "/api/reset") return mutate(body, [&] { return reset(); });
      }
      return error_response(404, "argument", "no such endpoint", req.method + " " + p);
    } catch (const Error& e) {
      return error_response(http_status(e.category()), to_string(e.category()), e.what(), e.context(), rev());
    } catch (const nlohmann::json::exception& e) {
      return error_response(400, "parse", e.what(), "body", rev());
    }
  }

 private:
  static nlohmann::json parse_body(const std::string& body) {
    if (body.empty()) return nlohmann::json::object();
    nlohmann::json j = detail::parse_json_text(body, "body");
    if (!j.is_object()) fail(ErrorCategory::parse, "request body must be a JSON object", "body");
    return j;
  }

  static std::optional<long long> query_int(const Request& req, const std::string& key) {
    auto it = req.query.find(key);
    if (it == req.query.end()) return std::nullopt;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      fail(ErrorCategory::argument, "query parameter must be an integer", key);
    }
  }

  template <class F>
  Response mutate(const nlohmann::json& body, F&& apply) {
    std::unique_lock lock(mu_);
    if (body.contains("rev") && !body["rev"].is_null()) {
      if (!body["rev"].is_number_unsigned() || body["rev"].get<std::uint64_t>() != rev_)
        return error_response(409, "conflict", "stale revision", "rev", rev_);
    }
    nlohmann::json out = apply();
    out["rev"] = rev_;
    return {200, out.dump(), "application/json"};
  }

  Response get_scene(const Request& req) const {
    const long long stride = query_int(req, "stride").value_or(1);
    if (stride < 1) fail(ErrorCategory::argument, "stride must be positive", "stride");
    std::shared_lock lock(mu_);
    nlohmann::json gs = nlohmann::json::array();
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (std::size_t i = 0; i < scene_.size(); ++i) {
      const Gaussian& g = scene_.gaussians[i];
      lo = lo.cwiseMin(g.x);
      hi = hi.cwiseMax(g.x);
      if (i % static_cast<std::size_t>(stride)) continue;
      gs.push_back({{"id", g.id}, {"x", vec3_to_json(g.x)}, {"c", vec3_to_json(g.c)}, {"label", labels_[i]}});
    }
    nlohmann::json j{{"rev", rev_}, {"gaussians", gs}};
    j["bounds"] = scene_.size() ? nlohmann::json{{"min", vec3_to_json(lo)}, {"max", vec3_to_json(hi)}} : nlohmann::json();
    return {200, j.dump(), "application/json"};
  }

  Response get_relevance(const Request& req) const {
    const auto id = query_int(req, "id");
    if (!id) fail(ErrorCategory::argument, "missing id", "id");
    std::shared_lock lock(mu_);
    require_ids({static_cast<int>(*id)}, inputs_.size());
    const RelevanceMap r = relevance(net_, inputs_, {static_cast<int>(*id)});
    nlohmann::json j{{"rev", rev_}, {"id", *id}, {"scores", r.scores}};
    return {200, j.dump(), "application/json"};
  }

  Response get_trajectory() const {
    std::shared_lock lock(mu_);
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : steps_) {
      nlohmann::json e{{"rev", s.rev}, {"kind", s.kind}, {"perturbation_id", s.perturbation_id},
                       {"perturbation", perturbation_to_json(s.p)}, {"provenance", s.provenance},
                       {"displaced", {{"mean", s.mean}, {"max", s.max}}}, {"leakage", s.leakage}};
      steps.push_back(e);
    }
    return {200, nlohmann::json{{"rev", rev_}, {"steps", steps}}.dump(), "application/json"};
  }

  Response get_render(const Request& req) const {
    const long long cam = query_int(req, "cam").value_or(0);
    if (cam < 0 || cam >= static_cast<long long>(cameras_.size()))
      fail(ErrorCategory::argument, "camera index out of range", "cam");
    std::shared_lock lock(mu_);
    Response r{200, encode_ppm(render_color(scene_, cameras_[static_cast<std::size_t>(cam)])), "image/x-portable-pixmap"};
    return r;
  }

  Response get_save() const {
    std::shared_lock lock(mu_);
    nlohmann::json j{{"rev", rev_}, {"scene", scene_to_json(scene_)}, {"checkpoint", net_to_json(net_)}};
    return {200, j.dump(), "application/json"};
  }

  Response post_prompt(const nlohmann::json& body) const {
    Camera cam = cameras_.front();
    if (body.contains("camera")) {
      const auto& c = body["camera"];
      if (c.contains("index")) {
        const int k = c["index"].get<int>();
        if (k < 0 || k >= static_cast<int>(cameras_.size())) fail(ErrorCategory::argument, "camera index out of range", "camera.index");
        cam = cameras_[static_cast<std::size_t>(k)];
      } else {
        cam = camera_from_json(c);
      }
    }
    if (!body.contains("screen")) fail(ErrorCategory::argument, "missing screen coordinates", "screen");
    const int px = body["screen"].at("px").get<int>();
    const int py = body["screen"].at("py").get<int>();
    if (body.contains("mode") && body["mode"] != "select") fail(ErrorCategory::argument, "unsupported prompt mode", "mode");
    std::shared_lock lock(mu_);
    const int id = prompt_to_gaussian(scene_, cam, px, py);
    return {200, nlohmann::json{{"rev", rev_}, {"gaussian_id", id}}.dump(), "application/json"};
  }

  // Mutations below run under the unique lock.

  nlohmann::json record(std::string kind, Perturbation p, nlohmann::json provenance) {
    Applied a = apply_perturbation(net_, inputs_, scene_, p);
    const std::vector<int> region = prompt_region(labels_, p.ids);
    std::vector<char> in_region(scene_.size(), 0);
    for (int id : region) in_region[static_cast<std::size_t>(id)] = 1;
    std::vector<int> others;
    double mx = 0.0;
    for (std::size_t i = 0; i < scene_.size(); ++i) {
      if (!in_region[i]) others.push_back(static_cast<int>(i));
      else mx = std::max(mx, a.displacement[i].dx.norm());
    }
    const double mean = mean_translation(a.displacement, region);
    const double leak = mean > 0.0 ? mean_translation(a.displacement, others) / mean : 0.0;
    net_ = std::move(a.net);
    scene_ = std::move(a.scene);
    ++rev_;
    Step s{rev_, std::move(kind), static_cast<int>(registry_.size()), p, std::move(provenance), mean, mx, leak};
    registry_.push_back(p);
    steps_.push_back(s);
    return {{"perturbation_id", s.perturbation_id}, {"displaced", {{"mean", mean}, {"max", mx}}}, {"leakage", leak}};
  }

  nlohmann::json apply_new(const nlohmann::json& body) {
    std::vector<int> ids = body.at("ids").get<std::vector<int>>();
    require_ids(ids, inputs_.size());
    Vector u = output_axis(2);
    if (body.contains("u")) {
      const Vec3 v = vec3_from_json(body["u"], "u");
      u = direction_from_xyz(v);
    }
    const bool refresh = body.value("refresh", true);
    Perturbation p = make_perturbation(refresh ? net_ : canonical_net_, inputs_, ids, u, 0.0);
    if (body.contains("scale")) {
      p.scale = body["scale"].get<double>();
    } else {
      const double d = body.value("auto_scale", 0.1);
      if (!(d > 0.0)) fail(ErrorCategory::argument, "auto_scale must be positive", "auto_scale");
      p.scale = auto_scale(net_, inputs_, prompt_region(labels_, ids), p.n, d);
    }
    if (!std::isfinite(p.scale)) fail(ErrorCategory::argument, "scale must be finite", "scale");
    return record("perturb", std::move(p), {{"refresh", refresh}});
  }

  const Perturbation& lookup(const nlohmann::json& j, const std::string& ctx) const {
    const int k = j.get<int>();
    if (k < 0 || k >= static_cast<int>(registry_.size())) fail(ErrorCategory::argument, "unknown perturbation id", ctx);
    return registry_[static_cast<std::size_t>(k)];
  }

  nlohmann::json apply_compose(const nlohmann::json& body) {
    const auto& list = body.at("perturbation_ids");
    if (!list.is_array() || list.size() < 2) fail(ErrorCategory::argument, "compose needs at least two perturbations", "perturbation_ids");
    Perturbation p = lookup(list[0], "perturbation_ids");
    for (std::size_t i = 1; i < list.size(); ++i) p = compose(p, lookup(list[i], "perturbation_ids"));
    return record("compose", std::move(p), {{"from", list}});
  }

  nlohmann::json apply_twist(const nlohmann::json& body) {
    const Perturbation& base = lookup(body.at("base_perturbation"), "base_perturbation");
    const double deg = body.at("angle_deg").get<double>();
    const std::uint64_t seed = body.value("seed", std::uint64_t{0});
    const Matrix nn = base.n / base.n.norm();
    const Matrix partner = twist_partner(nn, seed);
    const double phi = deg * std::numbers::pi / 180.0;
    Perturbation p = base;
    p.n = std::cos(phi) * nn + std::sin(phi) * partner;
    p.twist_deg = deg;
    return record("twist", std::move(p), {{"base", body["base_perturbation"]}, {"seed", seed}});
  }

  nlohmann::json reset() {
    scene_ = canonical_scene_;
    net_ = canonical_net_;
    registry_.clear();
    steps_.clear();
    ++rev_;
    return nlohmann::json::object();
  }

  const Scene canonical_scene_;
  const MotionNet canonical_net_;
  const std::vector<Vec3> inputs_;
  const std::vector<int> labels_;
  const std::vector<Camera> cameras_;

  mutable std::shared_mutex mu_;
  Scene scene_;
  MotionNet net_;
  std::vector<Perturbation> registry_;
  std::vector<Step> steps_;
  std::uint64_t rev_ = 0;
};

}  // namespace mishape
