#include "parenting/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "parenting/errors.hpp"

namespace parenting {

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'R', 'N', 'T', 'C', 'K', 'P', 'T'};

class Writer {
public:
    explicit Writer(std::ofstream& out) : out_(out) {}
    template <typename T>
    void pod(const T& v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

private:
    std::ofstream& out_;
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : data_(std::move(data)) {}
    template <typename T>
    T pod(const char* what) {
        T v{};
        bytes(&v, sizeof(T), what);
        return v;
    }
    void bytes(void* dst, std::size_t n, const char* what) {
        if (data_.size() - pos_ < n)
            throw TruncatedFileError(std::string("checkpoint truncated while reading ") + what);
        std::memcpy(dst, data_.data() + pos_, n);
        pos_ += n;
    }
    bool at_end() const { return pos_ == data_.size(); }

private:
    std::vector<char> data_;
    std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const Matrix& m) {
    w.pod(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.pod(static_cast<std::int64_t>(m.rows()));
    w.pod(static_cast<std::int64_t>(m.cols()));
    w.bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

void read_tensor(Reader& r, const std::string& expected_name, Matrix& dst) {
    const auto len = r.pod<std::uint32_t>("tensor name length");
    if (len > 4096) throw LoadError("checkpoint: implausible tensor name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "tensor name");
    if (name != expected_name)
        throw DimensionMismatchError("checkpoint: expected tensor '" + expected_name + "', found '" + name + "'");
    const auto rows = r.pod<std::int64_t>("tensor rows");
    const auto cols = r.pod<std::int64_t>("tensor cols");
    if (rows != dst.rows() || cols != dst.cols())
        throw DimensionMismatchError("checkpoint: tensor '" + name + "' is " + std::to_string(rows) + "x" +
                                     std::to_string(cols) + ", model expects " + std::to_string(dst.rows()) +
                                     "x" + std::to_string(dst.cols()));
    r.bytes(dst.data(), static_cast<std::size_t>(dst.size()) * sizeof(double), "tensor values");
}

}  // namespace

void save_checkpoint(const MicroTransformer& model, const std::filesystem::path& path) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        Writer w(out);
        const auto& cfg = model.config();
        w.bytes(kMagic.data(), kMagic.size());
        w.pod(kCheckpointVersion);
        w.pod(static_cast<std::int32_t>(cfg.num_layers));
        w.pod(static_cast<std::int32_t>(cfg.model_dim));
        w.pod(static_cast<std::int32_t>(cfg.num_heads));
        w.pod(static_cast<std::int32_t>(cfg.ffn_dim));
        w.pod(static_cast<std::int32_t>(cfg.vocab_size));
        w.pod(static_cast<std::int32_t>(cfg.max_seq_len));
        w.pod(static_cast<std::uint8_t>(cfg.adapter_mode));
        w.pod(static_cast<std::int32_t>(cfg.adapter_rank));
        w.pod(cfg.seed);
        w.pod(static_cast<std::uint32_t>(model.others().size() + model.units().size()));
        for (const auto& t : model.others()) write_tensor(w, t.name, t.values);
        for (const auto& u : model.units()) write_tensor(w, u.id.to_string(), u.values);
        out.flush();
        if (!out) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

MicroTransformer load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(std::move(data));

    std::array<char, 8> magic{};
    r.bytes(magic.data(), magic.size(), "magic");
    if (magic != kMagic) throw LoadError("not a checkpoint file: " + path.string());
    const auto version = r.pod<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        throw VersionMismatchError("checkpoint version " + std::to_string(version) + ", expected " +
                                   std::to_string(kCheckpointVersion));
    ModelConfig cfg;
    cfg.num_layers = r.pod<std::int32_t>("config");
    cfg.model_dim = r.pod<std::int32_t>("config");
    cfg.num_heads = r.pod<std::int32_t>("config");
    cfg.ffn_dim = r.pod<std::int32_t>("config");
    cfg.vocab_size = r.pod<std::int32_t>("config");
    cfg.max_seq_len = r.pod<std::int32_t>("config");
    const auto mode = r.pod<std::uint8_t>("config");
    if (mode > 1) throw LoadError("checkpoint: unknown adapter mode");
    cfg.adapter_mode = static_cast<AdapterMode>(mode);
    cfg.adapter_rank = r.pod<std::int32_t>("config");
    cfg.seed = r.pod<std::uint64_t>("config");

    if (expected) {
        ModelConfig a = cfg;
        ModelConfig b = *expected;
        a.seed = b.seed = 0;  // the seed does not shape tensors
        if (!(a == b)) throw DimensionMismatchError("checkpoint " + path.string() + " was written for a different model configuration");
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw LoadError(std::string("checkpoint holds an invalid configuration: ") + e.what());
    }

    MicroTransformer model = MicroTransformer::init(cfg);
    const auto count = r.pod<std::uint32_t>("tensor count");
    if (count != model.others().size() + model.units().size())
        throw DimensionMismatchError("checkpoint tensor count does not match its configuration");
    for (auto& t : model.others()) read_tensor(r, t.name, t.values);
    for (auto& u : model.units()) read_tensor(r, u.id.to_string(), u.values);
    if (!r.at_end()) throw LoadError("checkpoint has trailing bytes");
    if (!model.all_finite()) throw LoadError("checkpoint contains non-finite values");
    return model;
}

}  // namespace parenting
