#include "deidbench/adapter.hpp"

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <httplib.h>
#include <json.hpp>

namespace deidbench {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

void AdapterConfig::validate() const {
    if (timeout_ms <= 0) throw ConfigError("adapter timeout must be > 0");
    if (batch_size < 1) throw ConfigError("adapter batch size must be >= 1");
    if (kind == Kind::Subprocess && command.empty())
        throw ConfigError("subprocess adapter requires a command");
    if (kind == Kind::Http && endpoint.empty())
        throw ConfigError("http adapter requires an endpoint");
}

// ---------------------------------------------------------------------------
// Response parsing shared by both transports
// ---------------------------------------------------------------------------

namespace {

Span response_span(const json& j, const std::string& raw) {
    if (!j.is_object() || !j.contains("start") || !j.contains("end"))
        throw MalformedResponse("span missing start/end", raw);
    Span s;
    s.start = j.at("start").get<std::uint64_t>();
    s.end = j.at("end").get<std::uint64_t>();
    s.category = j.contains("category")
                     ? category_from_string(j.at("category").get<std::string>())
                     : PiiCategory::Other;
    return s;
}

Prediction response_prediction(const json& j, const std::string& raw) {
    if (!j.is_object() || !j.contains("id") || !j.contains("spans"))
        throw MalformedResponse("response missing id or spans", raw);
    Prediction p;
    p.note_id = j.at("id").get<std::string>();
    if (!j.at("spans").is_array())
        throw MalformedResponse("spans is not an array", raw);
    for (const json& js : j.at("spans")) p.spans.push_back(response_span(js, raw));
    return p;
}

std::vector<std::string> pending_ids(const std::vector<AnnotatedNote>& notes,
                                     std::size_t begin, std::size_t end,
                                     const std::unordered_set<std::string>& seen) {
    std::vector<std::string> ids;
    for (std::size_t i = begin; i < end; ++i)
        if (!seen.count(notes[i].id)) ids.push_back(notes[i].id);
    return ids;
}

// ---------------------------------------------------------------------------
// Subprocess child
// ---------------------------------------------------------------------------

class Subprocess {
public:
    Subprocess(const std::string& command, int timeout_ms)
        : timeout_ms_(timeout_ms) {
        // Writes to a dead child must surface as write errors, not SIGPIPE.
        std::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2];
        if (pipe(to_child) != 0 || pipe(from_child) != 0)
            throw IoError("cannot create adapter pipes");
        pid_ = fork();
        if (pid_ < 0) throw IoError("cannot fork adapter process");
        if (pid_ == 0) {
            dup2(to_child[0], STDIN_FILENO);
            dup2(from_child[1], STDOUT_FILENO);
            ::close(to_child[0]);
            ::close(to_child[1]);
            ::close(from_child[0]);
            ::close(from_child[1]);
            execl("/bin/sh", "sh", "-c", command.c_str(),
                  static_cast<char*>(nullptr));
            _exit(127);
        }
        ::close(to_child[0]);
        ::close(from_child[1]);
        stdin_fd_ = to_child[1];
        stdout_fd_ = from_child[0];
    }

    ~Subprocess() {
        if (stdin_fd_ >= 0) ::close(stdin_fd_);
        if (stdout_fd_ >= 0) ::close(stdout_fd_);
        if (pid_ > 0) {
            kill(pid_, SIGKILL);
            waitpid(pid_, nullptr, 0);
        }
    }

    void write_line(const std::string& line) {
        std::string payload = line + "\n";
        std::size_t off = 0;
        while (off < payload.size()) {
            ssize_t n = write(stdin_fd_, payload.data() + off,
                              payload.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw MalformedResponse(
                    "adapter stdin closed: " + std::string(strerror(errno)),
                    line);
            }
            off += static_cast<std::size_t>(n);
        }
    }

    /// Reads one newline-terminated line, honoring the configured timeout.
    /// Returns false on timeout or clean EOF; timed_out() disambiguates.
    bool read_line(std::string& line) {
        timed_out_ = false;
        auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms_);
        while (true) {
            std::size_t nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                line = buffer_.substr(0, nl);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                buffer_.erase(0, nl + 1);
                return true;
            }
            int remaining = static_cast<int>(
                std::chrono::duration_cast<std::chrono::milliseconds>(
                    deadline - Clock::now())
                    .count());
            if (remaining <= 0) return timed_out_ = true, false;
            pollfd pfd{stdout_fd_, POLLIN, 0};
            int rc = poll(&pfd, 1, remaining);
            if (rc == 0) return timed_out_ = true, false;
            if (rc < 0) {
                if (errno == EINTR) continue;
                throw IoError("poll on adapter stdout failed");
            }
            char chunk[4096];
            ssize_t n = read(stdout_fd_, chunk, sizeof chunk);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw IoError("read from adapter stdout failed");
            }
            if (n == 0) return false; // EOF
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    bool timed_out() const { return timed_out_; }

    /// Closes stdin and reaps the child. Throws NonZeroExit on failure
    /// status; kills the child if it outlives the timeout.
    void finish() {
        if (pid_ <= 0) return;
        if (stdin_fd_ >= 0) {
            ::close(stdin_fd_);
            stdin_fd_ = -1;
        }
        auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms_);
        int status = 0;
        while (true) {
            pid_t rc = waitpid(pid_, &status, WNOHANG);
            if (rc == pid_) break;
            if (rc < 0) throw IoError("waitpid on adapter failed");
            if (Clock::now() >= deadline) {
                kill(pid_, SIGKILL);
                waitpid(pid_, &status, 0);
                pid_ = -1;
                throw AdapterTimeout("adapter did not exit after stdin close",
                                     {});
            }
            usleep(2000);
        }
        pid_ = -1;
        if (WIFEXITED(status) && WEXITSTATUS(status) != 0)
            throw NonZeroExit("adapter exited with status " +
                                  std::to_string(WEXITSTATUS(status)),
                              WEXITSTATUS(status));
        if (WIFSIGNALED(status))
            throw NonZeroExit("adapter killed by signal " +
                                  std::to_string(WTERMSIG(status)),
                              128 + WTERMSIG(status));
    }

private:
    pid_t pid_ = -1;
    int stdin_fd_ = -1;
    int stdout_fd_ = -1;
    int timeout_ms_;
    std::string buffer_;
    bool timed_out_ = false;
};

struct ParsedUrl {
    std::string host;
    int port = 80;
    std::string path = "/";
};

ParsedUrl parse_http_url(const std::string& url) {
    const std::string prefix = "http://";
    if (url.rfind(prefix, 0) != 0)
        throw ConfigError("http adapter endpoint must start with http://");
    std::string rest = url.substr(prefix.size());
    ParsedUrl p;
    std::size_t slash = rest.find('/');
    std::string hostport = slash == std::string::npos ? rest
                                                      : rest.substr(0, slash);
    if (slash != std::string::npos) p.path = rest.substr(slash);
    std::size_t colon = hostport.rfind(':');
    if (colon == std::string::npos) {
        p.host = hostport;
    } else {
        p.host = hostport.substr(0, colon);
        p.port = std::stoi(hostport.substr(colon + 1));
    }
    if (p.host.empty()) throw ConfigError("http adapter endpoint has no host");
    return p;
}

} // namespace

// ---------------------------------------------------------------------------
// AdapterSession
// ---------------------------------------------------------------------------

struct AdapterSession::Impl {
    std::unique_ptr<Subprocess> child; // subprocess kind only
};

AdapterSession::AdapterSession(const AdapterConfig& config)
    : config_(config), impl_(std::make_unique<Impl>()) {
    config_.validate();
    if (config_.kind == AdapterConfig::Kind::Subprocess) {
        impl_->child =
            std::make_unique<Subprocess>(config_.command, config_.timeout_ms);
        auto t0 = Clock::now();
        std::string line;
        if (!impl_->child->read_line(line)) {
            if (impl_->child->timed_out())
                throw AdapterTimeout("adapter produced no READY line", {});
            impl_->child->finish(); // throws NonZeroExit if the child failed
            throw MalformedResponse("adapter closed stdout before READY", "");
        }
        if (line != "READY")
            throw MalformedResponse("expected READY, got '" + line + "'", line);
        info_.startup_seconds =
            std::chrono::duration<double>(Clock::now() - t0).count();
    } else {
        parse_http_url(config_.endpoint); // validate eagerly
    }
}

AdapterSession::~AdapterSession() = default;

void AdapterSession::close() {
    if (impl_->child) {
        impl_->child->finish();
        impl_->child.reset();
    }
}

namespace {

std::vector<Prediction> subprocess_predict(Subprocess& child,
                                           const AdapterConfig& config,
                                           const std::vector<AnnotatedNote>& notes) {
    std::unordered_map<std::string, Prediction> by_id;
    std::string line;
    for (std::size_t begin = 0; begin < notes.size();
         begin += config.batch_size) {
        std::size_t end = std::min(notes.size(), begin + config.batch_size);
        std::unordered_set<std::string> expected;
        for (std::size_t i = begin; i < end; ++i) {
            child.write_line(
                json{{"id", notes[i].id}, {"text", notes[i].text}}.dump());
            expected.insert(notes[i].id);
        }
        std::unordered_set<std::string> seen;
        for (std::size_t i = begin; i < end; ++i) {
            if (!child.read_line(line)) {
                if (child.timed_out())
                    throw AdapterTimeout("adapter response timed out",
                                         pending_ids(notes, begin, end, seen));
                child.finish();
                throw MalformedResponse(
                    "adapter closed stdout mid-batch; missing responses", "");
            }
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                throw MalformedResponse(std::string("bad response JSON: ") +
                                            e.what(),
                                        line);
            }
            Prediction p;
            try {
                p = response_prediction(j, line);
            } catch (const json::exception& e) {
                throw MalformedResponse(std::string("bad response shape: ") +
                                            e.what(),
                                        line);
            }
            if (!expected.count(p.note_id) || seen.count(p.note_id))
                throw MalformedResponse(
                    "response id '" + p.note_id + "' not expected in batch",
                    line);
            seen.insert(p.note_id);
            by_id[p.note_id] = std::move(p);
        }
    }
    std::vector<Prediction> out;
    out.reserve(notes.size());
    for (const AnnotatedNote& n : notes) out.push_back(std::move(by_id.at(n.id)));
    return out;
}

std::vector<Prediction> http_predict(const AdapterConfig& config,
                                     const std::vector<AnnotatedNote>& notes) {
    ParsedUrl url = parse_http_url(config.endpoint);
    httplib::Client client(url.host, url.port);
    client.set_connection_timeout(0, config.timeout_ms * 1000);
    client.set_read_timeout(config.timeout_ms / 1000,
                            (config.timeout_ms % 1000) * 1000);

    std::vector<Prediction> out;
    out.reserve(notes.size());
    for (std::size_t begin = 0; begin < notes.size();
         begin += config.batch_size) {
        std::size_t end = std::min(notes.size(), begin + config.batch_size);
        json batch = json::array();
        for (std::size_t i = begin; i < end; ++i)
            batch.push_back({{"id", notes[i].id}, {"text", notes[i].text}});
        auto res = client.Post(url.path, batch.dump(), "application/json");
        if (!res) {
            auto err = res.error();
            std::vector<std::string> ids = pending_ids(notes, begin, end, {});
            if (err == httplib::Error::ConnectionTimeout ||
                err == httplib::Error::Read || err == httplib::Error::Write)
                throw AdapterTimeout("http adapter did not answer", ids);
            throw MalformedResponse("http adapter unreachable: " +
                                        httplib::to_string(err),
                                    "");
        }
        if (res->status != 200)
            throw MalformedResponse("http adapter returned status " +
                                        std::to_string(res->status),
                                    res->body);
        json j;
        try {
            j = json::parse(res->body);
        } catch (const json::exception& e) {
            throw MalformedResponse(std::string("bad response JSON: ") +
                                        e.what(),
                                    res->body);
        }
        if (!j.is_array() || j.size() != end - begin)
            throw MalformedResponse(
                "response array length does not match batch", res->body);
        for (std::size_t i = begin; i < end; ++i) {
            Prediction p;
            try {
                p = response_prediction(j[i - begin], res->body);
            } catch (const json::exception& e) {
                throw MalformedResponse(std::string("bad response shape: ") +
                                            e.what(),
                                        res->body);
            }
            if (p.note_id != notes[i].id)
                throw MalformedResponse("response id '" + p.note_id +
                                            "' does not match request '" +
                                            notes[i].id + "'",
                                        res->body);
            out.push_back(std::move(p));
        }
    }
    return out;
}

} // namespace

std::vector<Prediction> AdapterSession::predict(
    const std::vector<AnnotatedNote>& notes) {
    std::unordered_map<std::string, std::size_t> text_len;
    for (const AnnotatedNote& n : notes) text_len[n.id] = n.text.size();
    if (text_len.size() != notes.size())
        throw ValidationError("duplicate note ids in adapter input");

    std::vector<Prediction> preds;
    if (config_.kind == AdapterConfig::Kind::Subprocess) {
        if (!impl_->child)
            throw ConfigError("adapter session already closed");
        preds = subprocess_predict(*impl_->child, config_, notes);
    } else {
        preds = http_predict(config_, notes);
    }

    for (Prediction& p : preds) {
        std::size_t touched =
            normalize_prediction_spans(p.spans, text_len.at(p.note_id));
        if (touched) {
            info_.clipped_spans += touched;
            info_.warnings.push_back("note '" + p.note_id + "': " +
                                     std::to_string(touched) +
                                     " span(s) clipped or merged");
        }
    }
    return preds;
}

std::vector<Prediction> run_external(const AdapterConfig& config,
                                     const std::vector<AnnotatedNote>& notes,
                                     AdapterRunInfo* info) {
    AdapterSession session(config);
    std::vector<Prediction> preds = session.predict(notes);
    session.close();
    if (info) *info = session.info();
    return preds;
}

} // namespace deidbench
