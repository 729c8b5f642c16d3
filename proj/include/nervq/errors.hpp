#pragma once

#include <stdexcept>
#include <string>

namespace nervq {

/// No bitwidth assignment hits the requested size window.
class InfeasibleTargetError : public std::runtime_error {
public:
    explicit InfeasibleTargetError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Base for unreadable files and bitstreams.
class StreamCorruptError : public std::runtime_error {
public:
    explicit StreamCorruptError(const std::string& msg) : std::runtime_error(msg) {}
};

class ChecksumError : public StreamCorruptError {
public:
    explicit ChecksumError(const std::string& msg) : StreamCorruptError(msg) {}
};

class TruncatedStreamError : public StreamCorruptError {
public:
    explicit TruncatedStreamError(const std::string& msg) : StreamCorruptError(msg) {}
};

class VersionMismatchError : public StreamCorruptError {
public:
    explicit VersionMismatchError(const std::string& msg) : StreamCorruptError(msg) {}
};

} // namespace nervq
