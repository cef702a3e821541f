#pragma once

#include <algorithm>
#include <chrono>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "kbcheck/error.hpp"

namespace kbcheck::http {

/// Connection and retry settings shared by the remote clients.
struct ClientOptions {
    std::string endpoint;   // e.g. "http://127.0.0.1:8080"
    int retries = 3;        // extra attempts after the first
    std::chrono::milliseconds initial_backoff{100};
    std::chrono::milliseconds timeout{30000};
    int max_in_flight = 4;
};

/// Splits "http://host:port/prefix" into the httplib base and a path prefix.
struct Endpoint {
    std::string base;
    std::string path_prefix;
};

inline Endpoint parse_endpoint(std::string_view url)
{
    const auto scheme = url.find("://");
    if (scheme == std::string_view::npos) {
        throw Error(ErrorCode::Config, "endpoint '" + std::string(url) + "' lacks a scheme");
    }
    const auto path = url.find('/', scheme + 3);
    Endpoint ep;
    ep.base = std::string(url.substr(0, path));
    if (path != std::string_view::npos) {
        ep.path_prefix = std::string(url.substr(path));
        while (!ep.path_prefix.empty() && ep.path_prefix.back() == '/') {
            ep.path_prefix.pop_back();
        }
    }
    return ep;
}

/// Thrown for failures worth retrying (connection errors, non-200 status).
struct TransportFailure {
    std::string reason;
};

/// Caps concurrent requests issued through one client.
class InFlightLimiter {
public:
    explicit InFlightLimiter(int slots) : sem_(std::max(1, slots)) {}

    class Slot {
    public:
        explicit Slot(InFlightLimiter& owner) : owner_(owner) { owner_.sem_.acquire(); }
        ~Slot() { owner_.sem_.release(); }
        Slot(const Slot&) = delete;
        Slot& operator=(const Slot&) = delete;

    private:
        InFlightLimiter& owner_;
    };

private:
    std::counting_semaphore<1 << 16> sem_;
};

/// Runs `attempt` up to 1 + retries times with exponential backoff between
/// transport failures. Protocol errors propagate immediately. After the last
/// failure throws Error(unavailable).
template <typename Fn>
auto with_retries(const ClientOptions& opts, ErrorCode unavailable, Fn&& attempt)
{
    auto backoff = opts.initial_backoff;
    std::string last;
    for (int i = 0; i <= opts.retries; ++i) {
        try {
            return attempt();
        } catch (const TransportFailure& failure) {
            last = failure.reason;
        }
        if (i < opts.retries) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
    }
    throw Error(unavailable, opts.endpoint + ": " + last);
}

inline nlohmann::json post_json(const ClientOptions& opts, const std::string& route,
                                const nlohmann::json& body)
{
    const auto ep = parse_endpoint(opts.endpoint);
    httplib::Client client(ep.base);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opts.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    auto res = client.Post(ep.path_prefix + route, body.dump(), "application/json");
    if (!res) {
        throw TransportFailure{httplib::to_string(res.error())};
    }
    if (res->status != 200) {
        throw TransportFailure{"HTTP status " + std::to_string(res->status)};
    }
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ProtocolError, std::string("response is not JSON: ") + e.what());
    }
}

} // namespace kbcheck::http
