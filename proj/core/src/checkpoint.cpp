#include "mpq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mpq/errors.hpp"

namespace mpq {
namespace container {

namespace {

template <typename T>
void put_le(std::ostream& os, T value) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(value);
    char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    os.write(bytes, sizeof(T));
}

void put_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }

void put_string(std::ostream& os, const std::string& s) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_shape(std::ostream& os, const Shape& shape) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_le<std::uint64_t>(os, d);
}

/// Cursor over the input stream that reports where a read failed.
class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}

    void context(std::string where) { where_ = std::move(where); }

    void bytes(char* out, std::size_t n, const char* field) {
        is_.read(out, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) fail(field, "unexpected end of file");
    }

    template <typename T>
    T le(const char* field) {
        unsigned char raw[sizeof(T)];
        bytes(reinterpret_cast<char*>(raw), sizeof(T), field);
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(raw[i]) << (8 * i);
        return static_cast<T>(u);
    }

    float f32(const char* field) { return std::bit_cast<float>(le<std::uint32_t>(field)); }
    double f64(const char* field) { return std::bit_cast<double>(le<std::uint64_t>(field)); }

    std::string string(const char* field) {
        const auto n = le<std::uint32_t>(field);
        if (n > (1u << 20)) fail(field, "implausible string length " + std::to_string(n));
        std::string s(n, '\0');
        bytes(s.data(), n, field);
        return s;
    }

    Shape shape(const char* field) {
        const auto rank = le<std::uint32_t>(field);
        if (rank == 0 || rank > 8) fail(field, "unsupported rank " + std::to_string(rank));
        Shape s(rank);
        std::uint64_t total = 1;
        for (auto& d : s) {
            d = le<std::uint64_t>(field);
            if (d == 0) fail(field, "zero extent");
            total *= d;
            if (total > (1ull << 32)) fail(field, "tensor too large");
        }
        return s;
    }

    [[noreturn]] void fail(const char* field, const std::string& why) const {
        throw FormatError("checkpoint " + where_ + ", field '" + field + "': " + why);
    }

private:
    std::istream& is_;
    std::string where_ = "header";
};

}  // namespace

std::int64_t Container::integer(const std::string& name) const {
    for (const auto& r : integers)
        if (r.name == name) return r.value;
    throw FormatError("checkpoint: missing integer record '" + name + "'");
}

void write(std::ostream& os, const Container& c) {
    os.write(c.magic.data(), 8);
    put_le<std::uint32_t>(os, c.version);
    put_le<std::uint64_t>(os, c.integers.size() + c.tensors.size() + c.clusters.size());
    for (const auto& r : c.integers) {
        put_le<std::uint8_t>(os, static_cast<std::uint8_t>(RecordKind::kInteger));
        put_string(os, r.name);
        put_le<std::int64_t>(os, r.value);
    }
    for (const auto& r : c.tensors) {
        if (shape_numel(r.shape) != r.values.size()) {
            throw FormatError("checkpoint: tensor '" + r.name + "' payload does not match shape " + shape_str(r.shape));
        }
        put_le<std::uint8_t>(os, static_cast<std::uint8_t>(RecordKind::kTensor));
        put_string(os, r.name);
        put_le<std::uint8_t>(os, static_cast<std::uint8_t>(DType::kF32));
        put_shape(os, r.shape);
        for (float v : r.values) put_f32(os, v);
    }
    for (const auto& r : c.clusters) {
        put_le<std::uint8_t>(os, static_cast<std::uint8_t>(RecordKind::kCluster));
        put_string(os, r.id);
        put_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.n_bits));
        put_f64(os, r.alpha);
        put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.members.size()));
        for (const auto& m : r.members) {
            put_string(os, m.name);
            put_shape(os, m.shape);
            put_le<std::uint64_t>(os, m.codes.size());
            os.write(reinterpret_cast<const char*>(m.codes.data()), static_cast<std::streamsize>(m.codes.size()));
        }
    }
    if (!os) throw FormatError("checkpoint: write failed");
}

Container read(std::istream& is) {
    Reader in(is);
    Container c;
    in.bytes(c.magic.data(), 8, "magic");
    if (c.magic != kModelMagic && c.magic != kQuantMagic) in.fail("magic", "not an mpq checkpoint");
    c.version = in.le<std::uint32_t>("version");
    if (c.version != kVersion) in.fail("version", "unsupported version " + std::to_string(c.version));
    const auto count = in.le<std::uint64_t>("record count");
    for (std::uint64_t i = 0; i < count; ++i) {
        in.context("record " + std::to_string(i));
        const auto kind = in.le<std::uint8_t>("kind");
        if (kind == static_cast<std::uint8_t>(RecordKind::kInteger)) {
            IntegerRecord r;
            r.name = in.string("name");
            r.value = in.le<std::int64_t>("value");
            c.integers.push_back(std::move(r));
        } else if (kind == static_cast<std::uint8_t>(RecordKind::kTensor)) {
            TensorRecord r;
            r.name = in.string("name");
            in.context("record " + std::to_string(i) + " ('" + r.name + "')");
            const auto dtype = in.le<std::uint8_t>("dtype");
            if (dtype != static_cast<std::uint8_t>(DType::kF32)) in.fail("dtype", "unknown dtype tag " + std::to_string(dtype));
            r.shape = in.shape("shape");
            r.values.resize(shape_numel(r.shape));
            for (float& v : r.values) v = in.f32("payload");
            c.tensors.push_back(std::move(r));
        } else if (kind == static_cast<std::uint8_t>(RecordKind::kCluster)) {
            ClusterRecord r;
            r.id = in.string("cluster id");
            in.context("record " + std::to_string(i) + " (cluster '" + r.id + "')");
            r.n_bits = in.le<std::uint8_t>("n_bits");
            r.alpha = in.f64("alpha");
            const auto members = in.le<std::uint32_t>("member count");
            for (std::uint32_t m = 0; m < members; ++m) {
                PackedMember pm;
                pm.name = in.string("member name");
                pm.shape = in.shape("member shape");
                const auto n = in.le<std::uint64_t>("packed size");
                if (n > (1ull << 32)) in.fail("packed size", "implausible size");
                pm.codes.resize(n);
                in.bytes(reinterpret_cast<char*>(pm.codes.data()), n, "packed codes");
                r.members.push_back(std::move(pm));
            }
            c.clusters.push_back(std::move(r));
        } else {
            in.fail("kind", "unknown record kind " + std::to_string(kind));
        }
    }
    return c;
}

void write_file(const std::filesystem::path& path, const Container& c) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
    write(os, c);
}

Container read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint '" + path.string() + "'");
    return read(is);
}

}  // namespace container

void put_model_config(container::Container& c, const ModelConfig& config) {
    auto put = [&](const char* name, std::size_t v) { c.integers.push_back({name, static_cast<std::int64_t>(v)}); };
    put("meta.vocab", config.vocab);
    put("meta.d_model", config.d_model);
    put("meta.d_ff", config.d_ff);
    put("meta.n_heads", config.n_heads);
    put("meta.n_layers", config.n_layers);
    put("meta.max_len", config.max_len);
    put("meta.tied_output", config.tied_output ? 1 : 0);
}

ModelConfig get_model_config(const container::Container& c) {
    auto get = [&](const char* name) {
        const auto v = c.integer(name);
        if (v < 0) throw FormatError(std::string("checkpoint: negative value for '") + name + "'");
        return static_cast<std::size_t>(v);
    };
    ModelConfig m;
    m.vocab = get("meta.vocab");
    m.d_model = get("meta.d_model");
    m.d_ff = get("meta.d_ff");
    m.n_heads = get("meta.n_heads");
    m.n_layers = get("meta.n_layers");
    m.max_len = get("meta.max_len");
    m.tied_output = get("meta.tied_output") != 0;
    try {
        m.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: inconsistent model header: ") + e.what());
    }
    return m;
}

void save_model(const std::filesystem::path& path, const TransformerLM& model) {
    container::Container c;
    c.magic = container::kModelMagic;
    put_model_config(c, model.config());
    for (const auto& p : model.parameters()) {
        c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
    }
    container::write_file(path, c);
}

TransformerLM load_model(const std::filesystem::path& path) {
    container::Container c = container::read_file(path);
    if (c.magic != container::kModelMagic) {
        throw FormatError("checkpoint '" + path.string() + "' is not a full-precision model (quantized checkpoints "
                          "are loaded with load_quantized)");
    }
    const ModelConfig config = get_model_config(c);
    std::vector<NamedTensor> params;
    for (auto& r : c.tensors) params.push_back({r.name, Tensor(r.shape, std::move(r.values))});
    return TransformerLM::from_parameters(config, params);
}

std::array<char, 8> peek_magic(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint '" + path.string() + "'");
    std::array<char, 8> magic{};
    is.read(magic.data(), 8);
    if (is.gcount() != 8) throw FormatError("checkpoint '" + path.string() + "': truncated magic");
    return magic;
}

}  // namespace mpq
