#include <gtest/gtest.h>

#include <thread>

#include "mishape/http.hpp"
#include "mishape/shaping.hpp"
#include "support.hpp"

using namespace mishape;
using nlohmann::json;

namespace {

Session make_session() {
  const Scene scene = generate_scene(support::small_spec());
  MotionNet net = init(support::small_config(16));
  warm_start_head(net, positions(scene), 1);
  return Session(scene, net);
}

json call(Session& s, const std::string& method, const std::string& path, const json& body = json::object(),
          int expect = 200, std::map<std::string, std::string> query = {}) {
  const Response r = s.handle({method, path, std::move(query), method == "POST" ? body.dump() : ""});
  EXPECT_EQ(r.status, expect) << method << " " << path << ": " << r.body;
  return r.content_type == "application/json" ? json::parse(r.body) : json{{"raw_size", r.body.size()}};
}

}  // namespace

TEST(Session, SceneAndRender) {
  Session s = make_session();
  const json scene = call(s, "GET", "/api/scene");
  EXPECT_EQ(scene["rev"], 0);
  EXPECT_EQ(scene["gaussians"].size(), 180u);
  EXPECT_EQ(call(s, "GET", "/api/scene", {}, 200, {{"stride", "4"}})["gaussians"].size(), 45u);
  call(s, "GET", "/api/scene", {}, 400, {{"stride", "0"}});
  call(s, "GET", "/api/scene", {}, 400, {{"stride", "abc"}});

  const Response img = s.handle({"GET", "/api/render", {{"cam", "2"}}, ""});
  EXPECT_EQ(img.status, 200);
  EXPECT_EQ(img.content_type, "image/x-portable-pixmap");
  EXPECT_EQ(img.body.substr(0, 2), "P6");
  call(s, "GET", "/api/render", {}, 400, {{"cam", "99"}});
  call(s, "GET", "/api/nothing", {}, 404);
}

TEST(Session, PromptThenPerturb) {
  Session s = make_session();
  const Camera cam = s.cameras()[0];
  // Any pixel whose strongest Gaussian is well defined.
  const ContributionImage ci = contributions(s.scene(), cam);
  int px = -1, py = -1;
  for (int y = 0; y < cam.height && px < 0; ++y)
    for (int x = 0; x < cam.width; ++x)
      if (!ci.at(x, y).empty()) {
        px = x;
        py = y;
        break;
      }
  const json hit = call(s, "POST", "/api/prompt", {{"camera", {{"index", 0}}}, {"screen", {{"px", px}, {"py", py}}}});
  const int id = hit["gaussian_id"];
  EXPECT_EQ(id, prompt_to_gaussian(s.scene(), cam, px, py));
  const json miss = call(s, "POST", "/api/prompt", {{"screen", {{"px", 0}, {"py", 0}}}}, 404);
  EXPECT_EQ(miss["error"]["category"], "no-target");
  call(s, "POST", "/api/prompt", {{"screen", {{"px", -1}, {"py", 0}}}}, 400);
  const json full = call(s, "POST", "/api/prompt", {{"camera", camera_to_json(cam)}, {"screen", {{"px", px}, {"py", py}}}});
  EXPECT_EQ(full["gaussian_id"], id);
  call(s, "POST", "/api/prompt", {{"camera", {{"position", {0, 0, 1}}, {"look_at", {0, 0, 1}}}}, {"screen", {{"px", 1}, {"py", 1}}}},
       400);

  const json moved = call(s, "POST", "/api/perturb", {{"ids", {id}}, {"auto_scale", 0.08}, {"rev", 0}});
  EXPECT_EQ(moved["rev"], 1);
  EXPECT_EQ(moved["perturbation_id"], 0);
  EXPECT_NEAR(moved["displaced"]["max"].get<double>(), 0.08, 1e-6);
  EXPECT_GE(moved["leakage"].get<double>(), 0.0);
  const json traj = call(s, "GET", "/api/trajectory");
  ASSERT_EQ(traj["steps"].size(), 1u);
  EXPECT_EQ(traj["steps"][0]["kind"], "perturb");
  EXPECT_EQ(call(s, "GET", "/api/relevance", {}, 200, {{"id", std::to_string(id)}})["scores"].size(), 180u);
  call(s, "GET", "/api/relevance", {}, 400);
}

TEST(Session, StaleRevisionIsRejected) {
  Session s = make_session();
  call(s, "POST", "/api/perturb", {{"ids", {1}}, {"scale", 0.01}, {"rev", 0}});
  const json stale = call(s, "POST", "/api/perturb", {{"ids", {1}}, {"scale", 0.01}, {"rev", 0}}, 409);
  EXPECT_EQ(stale["error"]["category"], "conflict");
  EXPECT_EQ(stale["rev"], 1);
  EXPECT_EQ(s.rev(), 1u);
  call(s, "POST", "/api/perturb", {{"ids", {1}}, {"scale", 0.01}});
  EXPECT_EQ(s.rev(), 2u);
}

TEST(Session, ComposeTwistAndErrors) {
  Session s = make_session();
  call(s, "POST", "/api/perturb", {{"ids", {2}}, {"scale", 0.02}});
  call(s, "POST", "/api/perturb", {{"ids", {100}}, {"scale", 0.03}, {"u", {1, 0, 0}}});
  const json comp = call(s, "POST", "/api/compose", {{"perturbation_ids", {0, 1}}});
  EXPECT_EQ(comp["perturbation_id"], 2);
  call(s, "POST", "/api/compose", {{"perturbation_ids", {0}}}, 400);
  call(s, "POST", "/api/compose", {{"perturbation_ids", {0, 7}}}, 400);
  const json tw = call(s, "POST", "/api/twist", {{"base_perturbation", 0}, {"angle_deg", 90}, {"seed", 3}});
  EXPECT_EQ(tw["perturbation_id"], 3);
  const json traj = call(s, "GET", "/api/trajectory");
  EXPECT_EQ(traj["steps"][3]["perturbation"]["twist_deg"], 90.0);
  EXPECT_EQ(traj["steps"][2]["kind"], "compose");

  EXPECT_EQ(call(s, "POST", "/api/perturb", {{"ids", {-3}}}, 400)["error"]["category"], "argument");
  EXPECT_EQ(call(s, "POST", "/api/perturb", {{"ids", {1}}, {"u", {0, 0, 0}}}, 400)["error"]["category"], "argument");
  call(s, "POST", "/api/perturb", {{"ids", "one"}}, 400);
  const Response bad = s.handle({"POST", "/api/perturb", {}, "{not json"});
  EXPECT_EQ(bad.status, 400);
  EXPECT_EQ(json::parse(bad.body)["error"]["category"], "parse");
}

TEST(Session, ResetRestoresCanonicalState) {
  Session s = make_session();
  const json before = call(s, "GET", "/api/save");
  call(s, "POST", "/api/perturb", {{"ids", {5}}, {"auto_scale", 0.1}});
  call(s, "POST", "/api/perturb", {{"ids", {150}}, {"auto_scale", 0.1}});
  EXPECT_NE(call(s, "GET", "/api/save")["scene"], before["scene"]);
  const json r = call(s, "POST", "/api/reset");
  EXPECT_EQ(r["rev"], 3);
  const json after = call(s, "GET", "/api/save");
  EXPECT_EQ(after["scene"], before["scene"]);
  EXPECT_EQ(after["checkpoint"], before["checkpoint"]);
  EXPECT_TRUE(call(s, "GET", "/api/trajectory")["steps"].empty());
}

TEST(Http, RoundTripOverLoopback) {
  Session s = make_session();
  httplib::Server server;
  mount(server, s);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  auto scene = client.Get("/api/scene?stride=10");
  ASSERT_TRUE(scene);
  EXPECT_EQ(scene->status, 200);
  EXPECT_EQ(json::parse(scene->body)["gaussians"].size(), 18u);

  auto moved = client.Post("/api/perturb", json{{"ids", {4}}, {"scale", 0.01}, {"rev", 0}}.dump(), "application/json");
  ASSERT_TRUE(moved);
  EXPECT_EQ(moved->status, 200);
  EXPECT_EQ(json::parse(moved->body)["rev"], 1);

  auto stale = client.Post("/api/perturb", json{{"ids", {4}}, {"scale", 0.01}, {"rev", 0}}.dump(), "application/json");
  ASSERT_TRUE(stale);
  EXPECT_EQ(stale->status, 409);

  auto img = client.Get("/api/render?cam=1");
  ASSERT_TRUE(img);
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/x-portable-pixmap");

  server.stop();
  t.join();
}
