#pragma once

// Out-of-process sources. Both speak the store framing: a request is a store
// header plus one latent record per code (zero embedding, empty image_ref);
// the response is a header plus one full record per code, in request order.
//
// subprocess parameters:
//   command (string), args (list of strings), batch_size (256),
//   connections (1), timeout_ms (30000)
//   The child is started as `command args... --latent-dim L --embed-dim D`
//   and serves batches on stdin/stdout until its stdin closes.
//
// remote parameters:
//   url ("http://host:port"), path ("/embed"), batch_size (256),
//   connections (1), timeout_ms (30000), retries (3), backoff_ms (100)

#include <memory>

#include "bbgc/source.hpp"

namespace bbgc {

struct AdapterOptions {
  std::size_t batch_size = 256;
  std::size_t connections = 1;
  int timeout_ms = 30000;
  int retries = 3;
  int backoff_ms = 100;

  static AdapterOptions from_parameters(const nlohmann::json& parameters);
};

std::unique_ptr<Generator> make_subprocess_generator(const SourceSpec& spec);
std::unique_ptr<Generator> make_remote_generator(const SourceSpec& spec);

// Validates a response batch against the request and returns its samples
// with the request latents attached. Embeddings are renormalized and rounded
// to f32. Throws MalformedResponse.
std::vector<Sample> accept_response(std::string_view bytes, std::span<const LatentCode> request,
                                    std::uint32_t embed_dim);

}  // namespace bbgc
