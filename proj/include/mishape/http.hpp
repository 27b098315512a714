#pragma once

// Binds a Session to an httplib server. Mutating routes share one queue
// (the session's writer lock); reads run concurrently.

#include <string>

// After Eigen: <resolv.h>, pulled in by httplib, defines `_res` as a macro.
#include "mishape/session.hpp"

#include <httplib.h>

namespace mishape {

inline Request to_request(const httplib::Request& r) {
  Request out{r.method, r.path, {}, r.body};
  for (const auto& [k, v] : r.params) out.query[k] = v;
  return out;
}

inline void mount(httplib::Server& server, Session& session) {
  auto forward = [&session](const httplib::Request& req, httplib::Response& res) {
    const Response r = session.handle(to_request(req));
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  for (const char* path : {"/api/scene", "/api/relevance", "/api/trajectory", "/api/render", "/api/save"})
    server.Get(path, forward);
  for (const char* path : {"/api/prompt", "/api/perturb", "/api/compose", "/api/twist", "/api/reset"})
    server.Post(path, forward);
}

}  // namespace mishape
