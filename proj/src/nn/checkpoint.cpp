#include "mdasr/nn/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <type_traits>

namespace mdasr::nn {

namespace {

constexpr std::array<char, 4> magic{'M', 'D', 'A', 'S'};

template <typename U>
U to_little(U value) {
    if constexpr (std::endian::native == std::endian::little) {
        return value;
    } else {
        std::array<unsigned char, sizeof(U)> bytes;
        std::memcpy(bytes.data(), &value, sizeof(U));
        std::reverse(bytes.begin(), bytes.end());
        std::memcpy(&value, bytes.data(), sizeof(U));
        return value;
    }
}

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        require(static_cast<bool>(out_), ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }

    template <typename U>
    void put(U value) {
        value = to_little(value);
        out_.write(reinterpret_cast<const char*>(&value), sizeof(U));
    }

    void bytes(const char* data, std::size_t n) { out_.write(data, static_cast<std::streamsize>(n)); }

    void finish(const std::filesystem::path& path) {
        out_.flush();
        require(static_cast<bool>(out_), ErrorKind::io, "write to '" + path.string() + "' failed");
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
        require(static_cast<bool>(in_), ErrorKind::io, "cannot open checkpoint '" + path.string() + "'");
    }

    template <typename U>
    U get() {
        U value{};
        bytes(reinterpret_cast<char*>(&value), sizeof(U));
        return to_little(value);
    }

    void bytes(char* data, std::size_t n) {
        in_.read(data, static_cast<std::streamsize>(n));
        require(static_cast<std::size_t>(in_.gcount()) == n, ErrorKind::corruption,
                "checkpoint '" + path_.string() + "' is truncated");
    }

private:
    std::ifstream in_;
    std::filesystem::path path_;
};

void write_config(Writer& w, const ModelConfig& c) {
    w.put<std::int32_t>(c.vocab_size);
    w.put<std::int32_t>(c.model_dim);
    w.put<std::int32_t>(c.num_layers);
    w.put<std::int32_t>(c.num_heads);
    w.put<std::int32_t>(c.ffn_dim);
    w.put<std::int32_t>(c.max_positions);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(c.attention));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(c.precision));
    w.put<std::int32_t>(c.feature_dim);
    w.put<std::int32_t>(c.audio_window);
    w.put<std::int32_t>(c.audio_slots);
}

ModelConfig read_header(Reader& r, const std::filesystem::path& path) {
    std::array<char, 4> m{};
    r.bytes(m.data(), m.size());
    require(m == magic, ErrorKind::format, "'" + path.string() + "' is not a checkpoint (bad magic)");
    const auto version = r.get<std::uint16_t>();
    require(version == checkpoint_version, ErrorKind::format,
            "unsupported checkpoint version " + std::to_string(version));
    ModelConfig c;
    c.vocab_size = r.get<std::int32_t>();
    c.model_dim = r.get<std::int32_t>();
    c.num_layers = r.get<std::int32_t>();
    c.num_heads = r.get<std::int32_t>();
    c.ffn_dim = r.get<std::int32_t>();
    c.max_positions = r.get<std::int32_t>();
    const auto attention = r.get<std::uint8_t>();
    const auto precision = r.get<std::uint8_t>();
    require(attention <= 1 && precision <= 1, ErrorKind::corruption, "checkpoint config has invalid enum values");
    c.attention = static_cast<AttentionMode>(attention);
    c.precision = static_cast<Precision>(precision);
    c.feature_dim = r.get<std::int32_t>();
    c.audio_window = r.get<std::int32_t>();
    c.audio_slots = r.get<std::int32_t>();
    try {
        c.validate();
    } catch (const Error& e) {
        fail(ErrorKind::corruption, std::string("checkpoint config is invalid: ") + e.what());
    }
    return c;
}

template <typename T>
constexpr std::uint8_t dtype_tag = std::is_same_v<T, double> ? 1 : 0;

}  // namespace

template <typename T>
void save_checkpoint(const Params<T>& params, const std::filesystem::path& path) {
    Writer w(path);
    w.bytes(magic.data(), magic.size());
    w.put<std::uint16_t>(checkpoint_version);
    ModelConfig c = params.config;
    c.precision = std::is_same_v<T, double> ? Precision::double_precision : Precision::single;
    write_config(w, c);
    const auto tensors = params.tensors();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<std::uint8_t>(dtype_tag<T>);
        w.put<std::uint8_t>(2);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(m->rows()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(m->cols()));
        for (Eigen::Index i = 0; i < m->size(); ++i) w.put<T>(m->data()[i]);
    }
    w.finish(path);
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
    Reader r(path);
    return read_header(r, path);
}

template <typename T>
Params<T> load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    Reader r(path);
    const ModelConfig stored = read_header(r, path);
    if (expected) {
        ModelConfig want = *expected;
        want.precision = stored.precision;
        require(want == stored, ErrorKind::config_mismatch,
                "checkpoint '" + path.string() + "' was saved with a different model config");
    }
    require(stored.precision == (std::is_same_v<T, double> ? Precision::double_precision : Precision::single),
            ErrorKind::format, "checkpoint '" + path.string() + "' has a different precision than requested");

    Params<T> params = Params<T>::zeros(stored);
    auto tensors = params.tensors();
    const auto count = r.get<std::uint32_t>();
    require(count == tensors.size(), ErrorKind::corruption,
            "checkpoint holds " + std::to_string(count) + " tensors, config implies " + std::to_string(tensors.size()));
    for (auto& [name, m] : tensors) {
        const auto name_len = r.get<std::uint32_t>();
        require(name_len < 4096, ErrorKind::corruption, "implausible tensor name length");
        std::string stored_name(name_len, '\0');
        r.bytes(stored_name.data(), name_len);
        require(stored_name == name, ErrorKind::corruption, "expected tensor '" + name + "', found '" + stored_name + "'");
        const auto dtype = r.get<std::uint8_t>();
        require(dtype == dtype_tag<T>, ErrorKind::format, "tensor '" + name + "' has unexpected dtype");
        const auto rank = r.get<std::uint8_t>();
        require(rank == 2, ErrorKind::corruption, "tensor '" + name + "' has rank " + std::to_string(rank));
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        require(rows == m->rows() && cols == m->cols(), ErrorKind::corruption, "tensor '" + name + "' has wrong shape");
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = r.get<T>();
    }
    return params;
}

template void save_checkpoint<float>(const Params<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Params<double>&, const std::filesystem::path&);
template Params<float> load_checkpoint<float>(const std::filesystem::path&, const std::optional<ModelConfig>&);
template Params<double> load_checkpoint<double>(const std::filesystem::path&, const std::optional<ModelConfig>&);

}  // namespace mdasr::nn
