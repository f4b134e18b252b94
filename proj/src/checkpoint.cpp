// SPDX-License-Identifier: Apache-2.0
#include "pts/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pts {

namespace {

Shape parse_shape(const std::string& text) {
    Shape shape;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) shape.push_back(std::stoul(item));
    return shape;
}

std::string join_shape(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "," : "") + std::to_string(shape[i]);
    return out;
}

std::string expect_line(std::istream& in, const std::string& key) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated header, expected '" + key + "'");
    if (line.rfind(key + " ", 0) != 0 && line != key)
        throw std::runtime_error("checkpoint: expected '" + key + "', got '" + line + "'");
    return line.size() > key.size() ? line.substr(key.size() + 1) : std::string{};
}

} // namespace

void write_f64_le(std::ostream& out, const double* values, std::size_t count) {
    unsigned char buf[8];
    for (std::size_t i = 0; i < count; ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>(bits >> (8 * b));
        out.write(reinterpret_cast<const char*>(buf), 8);
    }
}

void read_f64_le(std::istream& in, double* values, std::size_t count) {
    unsigned char buf[8];
    for (std::size_t i = 0; i < count; ++i) {
        if (!in.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("truncated float64 payload");
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
        values[i] = std::bit_cast<double>(bits);
    }
}

void save_network(const Network& net, std::ostream& out) {
    out << "ptsnet 1\n";
    out << "input " << join_shape(net.input_shape()) << "\n";
    out << "mode " << (net.mode() == Mode::Train ? "train" : "eval") << "\n";
    out << "layers " << net.size() << "\n";
    for (const auto& l : net.layers()) {
        const auto& s = l.spec;
        out << "layer " << to_string(s.kind) << ' ' << s.in << ' ' << s.out << ' ' << s.kernel << ' ' << s.stride << ' '
            << s.padding << "\n";
    }
    out << "end\n";
    for (const auto& l : net.layers()) {
        for (const Tensor* t : {&l.weight, &l.bias, &l.running_mean, &l.running_var}) {
            write_f64_le(out, t->data(), t->numel());
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed");
}

Network load_network(std::istream& in) {
    if (expect_line(in, "ptsnet") != "1") throw std::runtime_error("checkpoint: unsupported version");
    const Shape input = parse_shape(expect_line(in, "input"));
    const std::string mode = expect_line(in, "mode");
    if (mode != "train" && mode != "eval") throw std::runtime_error("checkpoint: bad mode '" + mode + "'");
    const std::size_t count = std::stoul(expect_line(in, "layers"));
    std::vector<LayerSpec> specs;
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream ls(expect_line(in, "layer"));
        std::string kind;
        LayerSpec s;
        if (!(ls >> kind >> s.in >> s.out >> s.kernel >> s.stride >> s.padding))
            throw std::runtime_error("checkpoint: malformed layer line " + std::to_string(i));
        s.kind = parse_layer_kind(kind);
        specs.push_back(s);
    }
    expect_line(in, "end");
    Network net(input, std::move(specs));
    net.set_mode(mode == "train" ? Mode::Train : Mode::Eval);
    for (auto& l : net.layers()) {
        for (Tensor* t : {&l.weight, &l.bias, &l.running_mean, &l.running_var}) {
            read_f64_le(in, t->data(), t->numel());
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
    return net;
}

void save_network(const Network& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
    save_network(net, out);
}

Network load_network(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    return load_network(in);
}

} // namespace pts
