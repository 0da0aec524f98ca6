#include "bbgc/adapters.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <mutex>
#include <thread>

#include <httplib.h>

#include "bbgc/parallel.hpp"
#include "bbgc/store.hpp"

extern char** environ;

namespace bbgc {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::span<const LatentCode>> split_batches(std::span<const LatentCode> latents, std::size_t batch) {
  std::vector<std::span<const LatentCode>> out;
  for (std::size_t i = 0; i < latents.size(); i += batch) {
    out.push_back(latents.subspan(i, std::min(batch, latents.size() - i)));
  }
  return out;
}

// Runs batches over `connections` workers. Batch b always goes to worker
// b % connections, and each worker handles its batches in order.
template <class Conn, class Make>
std::vector<Sample> run_batches(std::span<const LatentCode> latents, const AdapterOptions& opt,
                                std::vector<std::unique_ptr<Conn>>& pool, Make&& make_connection) {
  const auto batches = split_batches(latents, opt.batch_size);
  std::vector<std::vector<Sample>> results(batches.size());
  const std::size_t workers = std::min(opt.connections, std::max<std::size_t>(1, batches.size()));
  while (pool.size() < workers) pool.push_back(nullptr);

  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t b = w; b < batches.size(); b += workers) {
        if (!pool[w]) pool[w] = make_connection();
        results[b] = pool[w]->exchange(batches[b]);
      }
    } catch (...) {
      pool[w].reset();
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w);
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<Sample> out;
  out.reserve(latents.size());
  for (auto& r : results) {
    for (auto& s : r) out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subprocess

// Size of the leading complete batch in buf, or 0 if more bytes are needed.
std::size_t complete_batch_size(const std::string& buf) {
  if (buf.size() < kStoreHeaderBytes) return 0;
  const StoreHeader h = decode_header(buf);
  const std::size_t fixed = (static_cast<std::size_t>(h.latent_dim) + h.embed_dim) * 4 + 4;
  std::size_t offset = kStoreHeaderBytes;
  for (std::uint64_t i = 0; i < h.count; ++i) {
    if (buf.size() < offset + fixed) return 0;
    std::uint32_t ref_len;
    std::memcpy(&ref_len, buf.data() + offset + fixed - 4, 4);
    offset += fixed + ref_len;
    if (buf.size() < offset) return 0;
  }
  return offset;
}

class ChildProcess {
 public:
  ChildProcess(const std::vector<std::string>& argv, const SourceSpec& spec, const AdapterOptions& opt)
      : spec_(spec), opt_(opt) {
    int in_pipe[2];
    int out_pipe[2];
    if (pipe(in_pipe) != 0) throw Error(ErrorKind::SourceUnavailable, "pipe failed");
    if (pipe(out_pipe) != 0) {
      close(in_pipe[0]);
      close(in_pipe[1]);
      throw Error(ErrorKind::SourceUnavailable, "pipe failed");
    }
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, in_pipe[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, out_pipe[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&actions, in_pipe[1]);
    posix_spawn_file_actions_addclose(&actions, out_pipe[0]);

    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    const int rc = posix_spawnp(&pid_, args[0], &actions, nullptr, args.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    close(in_pipe[0]);
    close(out_pipe[1]);
    if (rc != 0) {
      close(in_pipe[1]);
      close(out_pipe[0]);
      pid_ = -1;
      throw Error(ErrorKind::SourceUnavailable, "cannot start '" + argv[0] + "': " + std::strerror(rc));
    }
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    fcntl(to_child_, F_SETFL, fcntl(to_child_, F_GETFL) | O_NONBLOCK);
    fcntl(from_child_, F_SETFL, fcntl(from_child_, F_GETFL) | O_NONBLOCK);
    fcntl(to_child_, F_SETFD, FD_CLOEXEC);
    fcntl(from_child_, F_SETFD, FD_CLOEXEC);
  }

  ~ChildProcess() {
    if (to_child_ >= 0) close(to_child_);
    if (from_child_ >= 0) close(from_child_);
    if (pid_ > 0) {
      // A healthy child exits on EOF; give it a moment before killing it.
      int status = 0;
      for (int i = 0; i < 100; ++i) {
        if (waitpid(pid_, &status, WNOHANG) == pid_) return;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      kill(pid_, SIGKILL);
      waitpid(pid_, &status, 0);
    }
  }

  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  std::vector<Sample> exchange(std::span<const LatentCode> batch) {
    StoreHeader h;
    h.latent_dim = spec_.latent_dim;
    h.embed_dim = spec_.embed_dim;
    h.seed = spec_.seed;
    const std::string request = encode_latent_batch(h, batch);

    const auto deadline = Clock::now() + std::chrono::milliseconds(opt_.timeout_ms);
    std::size_t written = 0;
    std::size_t complete = 0;
    char chunk[65536];
    while (complete == 0) {
      pollfd fds[2];
      int nfds = 0;
      fds[nfds++] = {from_child_, POLLIN, 0};
      if (written < request.size()) fds[nfds++] = {to_child_, POLLOUT, 0};
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      if (left <= 0) throw Error(ErrorKind::Timeout, "subprocess did not answer within " +
                                                         std::to_string(opt_.timeout_ms) + " ms");
      const int ready = poll(fds, nfds, static_cast<int>(std::min<long long>(left, 1000)));
      if (ready < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorKind::SourceUnavailable, std::string("poll failed: ") + std::strerror(errno));
      }
      if (nfds == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
        const ssize_t n = write(to_child_, request.data() + written, request.size() - written);
        if (n < 0 && errno != EAGAIN && errno != EINTR) {
          throw Error(ErrorKind::SourceUnavailable, std::string("subprocess closed its input: ") + std::strerror(errno));
        }
        if (n > 0) written += static_cast<std::size_t>(n);
      }
      if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
        const ssize_t n = read(from_child_, chunk, sizeof chunk);
        if (n == 0) throw Error(ErrorKind::SourceUnavailable, "subprocess exited mid-batch");
        if (n < 0 && errno != EAGAIN && errno != EINTR) {
          throw Error(ErrorKind::SourceUnavailable, std::string("read failed: ") + std::strerror(errno));
        }
        if (n > 0) {
          pending_.append(chunk, static_cast<std::size_t>(n));
          try {
            complete = complete_batch_size(pending_);
          } catch (const Error& e) {
            throw Error(ErrorKind::MalformedResponse, e.what());
          }
        }
      }
    }
    const std::string response = pending_.substr(0, complete);
    pending_.erase(0, complete);
    return accept_response(response, batch, spec_.embed_dim);
  }

 private:
  SourceSpec spec_;
  AdapterOptions opt_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string pending_;
};

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { signal(SIGPIPE, SIG_IGN); });
}

class SubprocessGenerator final : public Generator {
 public:
  explicit SubprocessGenerator(const SourceSpec& spec) : spec_(spec), opt_(AdapterOptions::from_parameters(spec.parameters)) {
    try {
      argv_.push_back(spec.parameters.at("command").get<std::string>());
      for (const auto& a : spec.parameters.value("args", nlohmann::json::array())) argv_.push_back(a.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidConfig, std::string("subprocess parameters: ") + e.what());
    }
    argv_.insert(argv_.end(), {"--latent-dim", std::to_string(spec.latent_dim), "--embed-dim",
                               std::to_string(spec.embed_dim)});
    ignore_sigpipe();
  }

  std::vector<Sample> generate(std::span<const LatentCode> latents) override {
    for (const auto& z : latents) {
      if (z.dim() != spec_.latent_dim) throw Error(ErrorKind::DimensionMismatch, "latent dimension mismatch");
    }
    return run_batches(latents, opt_, pool_, [&] { return std::make_unique<ChildProcess>(argv_, spec_, opt_); });
  }

 private:
  SourceSpec spec_;
  AdapterOptions opt_;
  std::vector<std::string> argv_;
  std::vector<std::unique_ptr<ChildProcess>> pool_;
};

// ---------------------------------------------------------------------------
// Remote

class RemoteConnection {
 public:
  RemoteConnection(const std::string& url, std::string path, const SourceSpec& spec, const AdapterOptions& opt)
      : client_(url), path_(std::move(path)), spec_(spec), opt_(opt) {
    const auto timeout = std::chrono::milliseconds(opt.timeout_ms);
    client_.set_connection_timeout(timeout);
    client_.set_read_timeout(timeout);
    client_.set_write_timeout(timeout);
    client_.set_keep_alive(true);
  }

  std::vector<Sample> exchange(std::span<const LatentCode> batch) {
    StoreHeader h;
    h.latent_dim = spec_.latent_dim;
    h.embed_dim = spec_.embed_dim;
    h.seed = spec_.seed;
    const std::string request = encode_latent_batch(h, batch);

    std::string last_error;
    bool timed_out = false;
    for (int attempt = 0; attempt <= opt_.retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(opt_.backoff_ms << (attempt - 1)));
      auto res = client_.Post(path_, request, "application/octet-stream");
      if (!res) {
        timed_out = res.error() == httplib::Error::Read || res.error() == httplib::Error::ConnectionTimeout;
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        timed_out = false;
        continue;
      }
      if (res->status != 200) {
        throw Error(ErrorKind::SourceUnavailable, "remote source answered HTTP " + std::to_string(res->status));
      }
      return accept_response(res->body, batch, spec_.embed_dim);
    }
    throw Error(timed_out ? ErrorKind::Timeout : ErrorKind::SourceUnavailable,
                "remote source failed after " + std::to_string(opt_.retries + 1) + " attempts: " + last_error);
  }

 private:
  httplib::Client client_;
  std::string path_;
  SourceSpec spec_;
  AdapterOptions opt_;
};

class RemoteGenerator final : public Generator {
 public:
  explicit RemoteGenerator(const SourceSpec& spec) : spec_(spec), opt_(AdapterOptions::from_parameters(spec.parameters)) {
    try {
      url_ = spec.parameters.at("url").get<std::string>();
      path_ = spec.parameters.value("path", std::string("/embed"));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidConfig, std::string("remote parameters: ") + e.what());
    }
  }

  std::vector<Sample> generate(std::span<const LatentCode> latents) override {
    for (const auto& z : latents) {
      if (z.dim() != spec_.latent_dim) throw Error(ErrorKind::DimensionMismatch, "latent dimension mismatch");
    }
    return run_batches(latents, opt_, pool_, [&] { return std::make_unique<RemoteConnection>(url_, path_, spec_, opt_); });
  }

 private:
  SourceSpec spec_;
  AdapterOptions opt_;
  std::string url_;
  std::string path_;
  std::vector<std::unique_ptr<RemoteConnection>> pool_;
};

}  // namespace

AdapterOptions AdapterOptions::from_parameters(const nlohmann::json& p) {
  AdapterOptions o;
  try {
    o.batch_size = p.value("batch_size", o.batch_size);
    o.connections = p.value("connections", o.connections);
    o.timeout_ms = p.value("timeout_ms", o.timeout_ms);
    o.retries = p.value("retries", o.retries);
    o.backoff_ms = p.value("backoff_ms", o.backoff_ms);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("adapter parameters: ") + e.what());
  }
  if (o.batch_size == 0) throw Error(ErrorKind::InvalidConfig, "batch_size must be positive");
  if (o.connections == 0) throw Error(ErrorKind::InvalidConfig, "connections must be positive");
  if (o.timeout_ms <= 0) throw Error(ErrorKind::InvalidConfig, "timeout_ms must be positive");
  if (o.retries < 0 || o.backoff_ms < 0) throw Error(ErrorKind::InvalidConfig, "retries and backoff_ms must be >= 0");
  return o;
}

std::vector<Sample> accept_response(std::string_view bytes, std::span<const LatentCode> request,
                                    std::uint32_t embed_dim) {
  DecodedBatch batch;
  try {
    batch = decode_batch(bytes, EmbeddingCheck::none);
  } catch (const Error& e) {
    throw Error(ErrorKind::MalformedResponse, e.what());
  }
  if (batch.header.embed_dim != embed_dim) {
    throw Error(ErrorKind::MalformedResponse, "response embedding dimension " + std::to_string(batch.header.embed_dim) +
                                                  ", expected " + std::to_string(embed_dim));
  }
  if (batch.samples.size() != request.size()) {
    throw Error(ErrorKind::MalformedResponse, "response has " + std::to_string(batch.samples.size()) +
                                                  " records for " + std::to_string(request.size()) + " latents");
  }
  if (!request.empty() && batch.header.latent_dim != request.front().dim()) {
    throw Error(ErrorKind::MalformedResponse, "response latent dimension does not match the request");
  }
  // decode_batch with EmbeddingCheck::none skips embeddings; decode them here
  // so non-unit and non-finite vectors are reported as malformed responses.
  const std::size_t L = batch.header.latent_dim;
  std::vector<Sample> out(request.size());
  std::size_t offset = kStoreHeaderBytes;
  for (std::size_t i = 0; i < request.size(); ++i) {
    std::vector<double> e(embed_dim);
    for (std::size_t k = 0; k < embed_dim; ++k) {
      float f;
      std::memcpy(&f, bytes.data() + offset + 4 * (L + k), 4);
      e[k] = f;
    }
    std::vector<double> rounded;
    try {
      const EmbeddingVector unit = normalize(e);
      rounded.assign(unit.values().begin(), unit.values().end());
      for (double& v : rounded) v = static_cast<double>(static_cast<float>(v));
      double sq = 0.0;
      for (double v : e) sq += v * v;
      if (std::abs(std::sqrt(sq) - 1.0) > kStoredNormTolerance) {
        throw Error(ErrorKind::MalformedResponse, "embedding " + std::to_string(i) + " is not unit norm");
      }
    } catch (const Error& err) {
      if (err.kind() == ErrorKind::MalformedResponse) throw;
      throw Error(ErrorKind::MalformedResponse, "embedding " + std::to_string(i) + ": " + err.what());
    }
    out[i].latent = request[i];
    out[i].embedding = EmbeddingVector::from_unit(std::move(rounded));
    out[i].image_ref = std::move(batch.samples[i].image_ref);
    offset += 4 * (L + embed_dim) + 4 + out[i].image_ref.size();
  }
  return out;
}

std::unique_ptr<Generator> make_subprocess_generator(const SourceSpec& spec) {
  return std::make_unique<SubprocessGenerator>(spec);
}

std::unique_ptr<Generator> make_remote_generator(const SourceSpec& spec) {
  return std::make_unique<RemoteGenerator>(spec);
}

}  // namespace bbgc
