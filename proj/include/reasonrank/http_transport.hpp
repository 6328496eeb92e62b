#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <httplib.h>

#include "reasonrank/errors.hpp"
#include "reasonrank/gateway.hpp"

namespace reasonrank {

/// POSTs chat-completion JSON to a configurable endpoint. The credential
/// comes from the REASONRANK_API_KEY environment variable and is sent as
/// a bearer token.
class HttpTransport : public Transport {
public:
    static constexpr const char* kApiKeyEnv = "REASONRANK_API_KEY";

    explicit HttpTransport(const std::string& endpoint_url) {
        auto scheme_end = endpoint_url.find("://");
        if (scheme_end == std::string::npos)
            throw ValidationError("endpoint URL must include a scheme: " + endpoint_url);
        auto path_start = endpoint_url.find('/', scheme_end + 3);
        if (path_start == std::string::npos) {
            base_ = endpoint_url;
            path_ = "/";
        } else {
            base_ = endpoint_url.substr(0, path_start);
            path_ = endpoint_url.substr(path_start);
        }
        const char* key = std::getenv(kApiKeyEnv);
        if (key != nullptr) api_key_ = key;
    }

    TransportResponse send(const std::string& request_body) override {
        httplib::Client client(base_);
        client.set_connection_timeout(10, 0);
        client.set_read_timeout(120, 0);
        httplib::Headers headers;
        if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
        auto result = client.Post(path_, headers, request_body, "application/json");
        if (!result)
            throw GatewayError("cannot reach teacher endpoint " + base_ + ": " +
                               httplib::to_string(result.error()));
        return {result->status, result->body};
    }

    const std::string& base() const { return base_; }
    const std::string& path() const { return path_; }
    bool has_credential() const { return !api_key_.empty(); }

private:
    std::string base_;
    std::string path_;
    std::string api_key_;
};

}  // namespace reasonrank
