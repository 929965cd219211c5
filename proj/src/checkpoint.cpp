#include "frailt/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "frailt/digest.hpp"
#include "frailt/error.hpp"

namespace frailt {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'R', 'L', 'T'};

class Writer {
public:
    template <class T>
    void pod(const T& v) {
        out_.append(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void bytes(std::string_view s) { out_.append(s); }
    void floats(std::span<const float> data) {
        out_.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
    }
    std::string finish() {
        Fnv1a h;
        h.update(out_);
        pod(h.value());
        return std::move(out_);
    }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}

    void need(std::size_t n, const char* what) const {
        if (in_.size() - pos_ < n) {
            throw IntegrityError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                                 std::to_string(pos_));
        }
    }
    template <class T>
    T pod(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, in_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string_view bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string_view s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void floats(std::span<float> out, const char* what) {
        const std::string_view s = bytes(out.size_bytes(), what);
        std::memcpy(out.data(), s.data(), s.size());
    }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
    check_weights(c.config, c.weights);
    Writer w;
    w.bytes(std::string_view(kMagic, 4));
    w.pod(kCheckpointVersion);
    const std::string config_json = nlohmann::json(c.config).dump();
    w.pod(static_cast<std::uint64_t>(config_json.size()));
    w.bytes(config_json);

    const auto params = named_parameters(c.weights);
    w.pod(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        w.pod(static_cast<std::uint32_t>(name.size()));
        w.bytes(name);
        w.pod(static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) {
            w.pod(static_cast<std::uint64_t>(d));
        }
    }
    for (const auto& [name, t] : params) {
        w.floats(t->data());
    }

    w.pod(static_cast<std::uint8_t>(c.state ? 1 : 0));
    if (c.state) {
        const TrainingState& s = *c.state;
        if (s.first_moment.size() != params.size() || s.second_moment.size() != params.size()) {
            throw DimensionError("training state holds moments for " + std::to_string(s.first_moment.size()) +
                                 " tensors, model has " + std::to_string(params.size()));
        }
        w.pod(s.step);
        w.pod(s.rng_state);
        for (const auto* moments : {&s.first_moment, &s.second_moment}) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                if ((*moments)[i].shape() != params[i].second->shape()) {
                    throw DimensionError("moment shape mismatch for " + params[i].first);
                }
                w.floats((*moments)[i].data());
            }
        }
        w.pod(static_cast<std::uint64_t>(s.history.size()));
        for (const LossRecord& r : s.history) {
            w.pod(static_cast<std::uint64_t>(r.step));
            w.pod(r.train_loss);
            w.pod(r.val_loss.value_or(std::numeric_limits<double>::quiet_NaN()));
        }
    }
    return w.finish();
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    Reader r(bytes);
    if (bytes.size() < 4 || r.bytes(4, "magic") != std::string_view(kMagic, 4)) {
        throw FormatError("not a checkpoint: bad magic");
    }
    const auto version = r.pod<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    // Verify the footer before trusting any length field.
    if (bytes.size() < 4 + 4 + 8) {
        throw IntegrityError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
    }
    {
        Fnv1a h;
        h.update(bytes.substr(0, bytes.size() - 8));
        std::uint64_t stored;
        std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
        if (stored != h.value()) {
            throw IntegrityError("checkpoint checksum mismatch (truncated or corrupted file)");
        }
    }
    Reader body(bytes.substr(0, bytes.size() - 8));
    body.bytes(8, "header");

    Checkpoint c;
    const auto json_len = body.pod<std::uint64_t>("config length");
    const std::string_view json_text = body.bytes(static_cast<std::size_t>(json_len), "config");
    try {
        c.config = nlohmann::json::parse(json_text).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config invalid: ") + e.what());
    }
    const ParamCount expected = param_count(c.config);

    const auto n_tensors = body.pod<std::uint32_t>("tensor count");
    if (n_tensors != expected.tensors.size()) {
        throw FormatError("checkpoint holds " + std::to_string(n_tensors) + " tensors, config implies " +
                          std::to_string(expected.tensors.size()));
    }
    std::vector<Tensor> tensors;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const auto name_len = body.pod<std::uint32_t>("tensor name length");
        const std::string name(body.bytes(name_len, "tensor name"));
        const auto rank = body.pod<std::uint32_t>("tensor rank");
        if (rank > 8) {
            throw FormatError("tensor " + name + " has implausible rank " + std::to_string(rank));
        }
        Shape shape;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape.push_back(static_cast<std::size_t>(body.pod<std::uint64_t>("tensor dims")));
        }
        if (name != expected.tensors[i].name || shape != expected.tensors[i].shape) {
            throw FormatError("checkpoint tensor " + std::to_string(i) + " is " + name + " " + shape_to_string(shape) +
                              ", config expects " + expected.tensors[i].name + " " +
                              shape_to_string(expected.tensors[i].shape));
        }
        tensors.push_back(Tensor::zeros(shape));
    }
    for (Tensor& t : tensors) {
        body.floats(t.data(), "tensor payload");
    }
    c.weights = zero_weights(c.config);
    {
        std::size_t i = 0;
        visit_parameters(c.weights, [&](const std::string&, Tensor& t) { t = std::move(tensors[i++]); });
    }

    const auto has_state = body.pod<std::uint8_t>("state flag");
    if (has_state > 1) {
        throw FormatError("bad training-state flag " + std::to_string(has_state));
    }
    if (has_state == 1) {
        TrainingState s;
        s.step = body.pod<std::uint64_t>("step");
        s.rng_state = body.pod<std::uint64_t>("rng state");
        for (auto* moments : {&s.first_moment, &s.second_moment}) {
            for (const TensorCount& tc : expected.tensors) {
                Tensor t = Tensor::zeros(tc.shape);
                body.floats(t.data(), "optimizer moments");
                moments->push_back(std::move(t));
            }
        }
        const auto n_history = body.pod<std::uint64_t>("history length");
        if (n_history > body.remaining() / 24) {
            throw IntegrityError("checkpoint history length " + std::to_string(n_history) + " exceeds file size");
        }
        for (std::uint64_t i = 0; i < n_history; ++i) {
            LossRecord rec;
            rec.step = static_cast<std::size_t>(body.pod<std::uint64_t>("history step"));
            rec.train_loss = body.pod<double>("history train loss");
            const double val = body.pod<double>("history val loss");
            if (!std::isnan(val)) {
                rec.val_loss = val;
            }
            s.history.push_back(rec);
        }
        c.state = std::move(s);
    }
    if (body.remaining() != 0) {
        throw IntegrityError(std::to_string(body.remaining()) + " unexpected trailing bytes in checkpoint");
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const std::string bytes = serialize_checkpoint(checkpoint);
    // Write then rename so a crash never leaves a half-written checkpoint.
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot write checkpoint " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw Error("failed writing checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

}  // namespace frailt
