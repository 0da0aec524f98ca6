#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <thread>

#include <httplib.h>

#include "bbgc/adapters.hpp"
#include "bbgc/source.hpp"
#include "bbgc/store.hpp"
#include "fake_embedding.hpp"

using namespace bbgc;

namespace {

constexpr std::uint32_t kL = 3;
constexpr std::uint32_t kD = 12;

SourceSpec subprocess_spec(const std::string& mode, nlohmann::json extra = nlohmann::json::object()) {
  SourceSpec spec;
  spec.kind = SourceKind::subprocess;
  spec.latent_dim = kL;
  spec.embed_dim = kD;
  spec.parameters = {{"command", BBGC_FAKE_DESCRIPTOR}, {"args", {"--mode", mode}}, {"batch_size", 64}};
  spec.parameters.update(extra);
  return spec;
}

void expect_fake_embeddings(const std::vector<Sample>& out, const std::vector<LatentCode>& z) {
  ASSERT_EQ(out.size(), z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    EXPECT_EQ(out[i].latent, z[i]);
    const auto want = fake::embed({z[i].values().begin(), z[i].values().end()}, kD);
    for (std::size_t k = 0; k < kD; ++k) EXPECT_NEAR(out[i].embedding[k], want[k], 1e-6);
  }
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Usage;
}

// Local HTTP server answering with the fake descriptor.
class FakeServer {
 public:
  FakeServer() {
    server_.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
      const int n = ++calls_;
      if (n <= fail_first_) {
        res.status = 503;
        return;
      }
      if (delay_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
      const auto request = decode_batch(req.body, EmbeddingCheck::none);
      res.set_content(fake::respond(request, scale_, drop_), "application/octet-stream");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  SourceSpec spec(nlohmann::json extra = nlohmann::json::object()) const {
    SourceSpec s;
    s.kind = SourceKind::remote;
    s.latent_dim = kL;
    s.embed_dim = kD;
    s.parameters = {{"url", "http://127.0.0.1:" + std::to_string(port_)}, {"batch_size", 50}, {"backoff_ms", 1}};
    s.parameters.update(extra);
    return s;
  }

  std::atomic<int> calls_{0};
  int fail_first_ = 0;
  int delay_ms_ = 0;
  double scale_ = 1.0;
  std::size_t drop_ = 0;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(Subprocess, ReturnsDescriptorEmbeddingsInOrder) {
  const auto z = sample_latents(300, kL, 4);
  auto gen = make_generator(subprocess_spec("ok"));
  const auto out = gen->generate(z);
  expect_fake_embeddings(out, z);
  EXPECT_EQ(out[0].image_ref, "fake/0");
  EXPECT_EQ(out[64].image_ref, "fake/0");  // second batch restarts numbering
  // The child stays up across calls.
  expect_fake_embeddings(gen->generate(z), z);
}

TEST(Subprocess, ConnectionCountDoesNotChangeOutput) {
  const auto z = sample_latents(500, kL, 5);
  const auto one = make_generator(subprocess_spec("ok"))->generate(z);
  const auto four = make_generator(subprocess_spec("ok", {{"connections", 4}}))->generate(z);
  ASSERT_EQ(one.size(), four.size());
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(one[i].embedding, four[i].embedding);
}

TEST(Subprocess, FailuresMapToErrorKinds) {
  const auto z = sample_latents(10, kL, 6);
  EXPECT_EQ(kind_of([&] { make_generator(subprocess_spec("short"))->generate(z); }), ErrorKind::MalformedResponse);
  EXPECT_EQ(kind_of([&] { make_generator(subprocess_spec("not-unit"))->generate(z); }),
            ErrorKind::MalformedResponse);
  EXPECT_EQ(kind_of([&] { make_generator(subprocess_spec("garbage"))->generate(z); }),
            ErrorKind::MalformedResponse);
  EXPECT_EQ(kind_of([&] { make_generator(subprocess_spec("exit"))->generate(z); }), ErrorKind::SourceUnavailable);
  EXPECT_EQ(kind_of([&] { make_generator(subprocess_spec("hang", {{"timeout_ms", 300}}))->generate(z); }),
            ErrorKind::Timeout);
  auto missing = subprocess_spec("ok");
  missing.parameters["command"] = "/nonexistent/descriptor";
  EXPECT_EQ(kind_of([&] { make_generator(missing)->generate(z); }), ErrorKind::SourceUnavailable);
}

TEST(Subprocess, RejectsWrongLatentDimension) {
  const auto z = sample_latents(4, kL + 1, 6);
  EXPECT_EQ(kind_of([&] { make_generator(subprocess_spec("ok"))->generate(z); }), ErrorKind::DimensionMismatch);
}

TEST(Remote, ReturnsDescriptorEmbeddings) {
  FakeServer server;
  const auto z = sample_latents(260, kL, 7);
  expect_fake_embeddings(make_generator(server.spec({{"connections", 3}}))->generate(z), z);
  EXPECT_EQ(server.calls_.load(), 6);
}

TEST(Remote, RetriesServerErrors) {
  FakeServer server;
  server.fail_first_ = 2;
  const auto z = sample_latents(20, kL, 8);
  expect_fake_embeddings(make_generator(server.spec())->generate(z), z);
  EXPECT_EQ(server.calls_.load(), 3);
}

TEST(Remote, GivesUpAfterRetries) {
  FakeServer server;
  server.fail_first_ = 100;
  const auto z = sample_latents(20, kL, 8);
  EXPECT_EQ(kind_of([&] { make_generator(server.spec({{"retries", 2}}))->generate(z); }),
            ErrorKind::SourceUnavailable);
  EXPECT_EQ(server.calls_.load(), 3);
}

TEST(Remote, SlowServerTimesOut) {
  FakeServer server;
  server.delay_ms_ = 800;
  const auto z = sample_latents(5, kL, 9);
  EXPECT_EQ(kind_of([&] { make_generator(server.spec({{"timeout_ms", 200}, {"retries", 0}}))->generate(z); }),
            ErrorKind::Timeout);
}

TEST(Remote, MalformedResponses) {
  FakeServer server;
  const auto z = sample_latents(5, kL, 10);
  server.drop_ = 1;
  EXPECT_EQ(kind_of([&] { make_generator(server.spec())->generate(z); }), ErrorKind::MalformedResponse);
  server.drop_ = 0;
  server.scale_ = 0.5;
  EXPECT_EQ(kind_of([&] { make_generator(server.spec())->generate(z); }), ErrorKind::MalformedResponse);
}

TEST(Remote, UnreachableHost) {
  SourceSpec s;
  s.kind = SourceKind::remote;
  s.latent_dim = kL;
  s.embed_dim = kD;
  s.parameters = {{"url", "http://127.0.0.1:1"}, {"retries", 1}, {"backoff_ms", 1}, {"timeout_ms", 500}};
  const auto z = sample_latents(5, kL, 11);
  const auto kind = kind_of([&] { make_generator(s)->generate(z); });
  EXPECT_TRUE(kind == ErrorKind::SourceUnavailable || kind == ErrorKind::Timeout);
}

TEST(AdapterOptions, Validation) {
  EXPECT_THROW((void)AdapterOptions::from_parameters({{"batch_size", 0}}), Error);
  EXPECT_THROW((void)AdapterOptions::from_parameters({{"connections", 0}}), Error);
  EXPECT_THROW((void)AdapterOptions::from_parameters({{"timeout_ms", -1}}), Error);
  const auto o = AdapterOptions::from_parameters(nlohmann::json::object());
  EXPECT_EQ(o.batch_size, 256u);
  EXPECT_EQ(o.retries, 3);
}
