#include "lmk/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace lmk::log {

namespace {

std::mutex g_mutex;
Sink g_sink;
std::atomic<bool> g_verbose{false};

void emit(Level level, const std::string& msg) {
    std::lock_guard lock(g_mutex);
    if (g_sink) {
        g_sink(level, msg);
        return;
    }
    const char* tag = level == Level::Warn ? "warning" : level == Level::Info ? "info" : "debug";
    std::cerr << "[" << tag << "] " << msg << '\n';
}

}  // namespace

void set_sink(Sink sink) {
    std::lock_guard lock(g_mutex);
    g_sink = std::move(sink);
}

void set_verbose(bool v) { g_verbose.store(v); }
bool verbose() { return g_verbose.load(); }

void debug(const std::string& msg) {
    if (g_verbose.load()) emit(Level::Debug, msg);
}
void info(const std::string& msg) {
    if (g_verbose.load()) emit(Level::Info, msg);
}
void warn(const std::string& msg) { emit(Level::Warn, msg); }

}  // namespace lmk::log
