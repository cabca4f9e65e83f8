// Small file and number-formatting helpers. All numeric text I/O goes through
// charconv so output never depends on the process locale.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <system_error>

#include "tsmix/errors.hpp"

namespace tsmix::io {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed on " + path.string());
    return content;
}

// Write-temp-then-rename so readers never observe partial files.
inline void atomic_write_file(const std::filesystem::path& path, std::string_view content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("write failed on " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

// Shortest round-trip decimal representation.
inline std::string fmt_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw ContractError("fmt_double: conversion failed");
    return std::string(buf, ptr);
}

// Fixed-point with a set digit count, for stable report tables.
inline std::string fmt_fixed(double v, int digits) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, digits);
    if (ec != std::errc()) throw ContractError("fmt_fixed: conversion failed");
    return std::string(buf, ptr);
}

inline double parse_double(std::string_view text, const std::string& where) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
        throw ParseError(where + ": malformed number '" + std::string(text) + "'");
    return v;
}

inline std::uint64_t parse_uint(std::string_view text, const std::string& where) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
        throw ParseError(where + ": malformed nonnegative integer '" + std::string(text) + "'");
    return v;
}

} // namespace tsmix::io
