#include "nextou/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "nextou/error.hpp"

namespace nextou {

namespace {

constexpr char kMagic[8] = {'N', 'X', 'T', 'U', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
public:
    template <typename T>
    void pod(const T& v) {
        buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void str(const std::string& s) {
        pod<std::uint64_t>(s.size());
        buf_.append(s);
    }
    void tensor(const Tensor& t) {
        pod<std::uint64_t>(static_cast<std::uint64_t>(t.rank()));
        for (Index e : t.shape()) pod<std::int64_t>(e);
        buf_.append(reinterpret_cast<const char*>(t.raw()), static_cast<std::size_t>(t.numel()) * sizeof(double));
    }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(const std::string& buf) : buf_(buf) {}

    template <typename T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint64_t>();
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    Tensor tensor() {
        const auto rank = pod<std::uint64_t>();
        if (rank > 8) throw CorruptedRecord("checkpoint: implausible tensor rank " + std::to_string(rank));
        Shape shape;
        for (std::uint64_t a = 0; a < rank; ++a) {
            const auto e = pod<std::int64_t>();
            if (e < 0) throw CorruptedRecord("checkpoint: negative extent");
            shape.push_back(e);
        }
        const auto n = static_cast<std::size_t>(shape_numel(shape));
        need(n * sizeof(double));
        Tensor t(shape);
        std::memcpy(t.raw(), buf_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
        return t;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw CorruptedRecord("checkpoint: truncated payload");
    }
    const std::string& buf_;
    std::size_t pos_ = 0;
};

}  // namespace

Checkpoint Checkpoint::capture(std::string config_yaml, Index iteration, const ParameterSet& params,
                               const std::vector<Tensor>* momentum) {
    Checkpoint c;
    c.config_yaml = std::move(config_yaml);
    c.iteration = iteration;
    for (const ParameterRef& p : params.params()) c.entries.push_back({p.name, Kind::parameter, p.var->value()});
    for (const BufferRef& b : params.buffers()) c.entries.push_back({b.name, Kind::buffer, *b.tensor});
    if (momentum) {
        const auto& ps = params.params();
        for (std::size_t i = 0; i < ps.size(); ++i) c.entries.push_back({ps[i].name, Kind::momentum, (*momentum)[i]});
    }
    return c;
}

void Checkpoint::restore(ParameterSet& params, std::vector<Tensor>* momentum) const {
    std::map<std::pair<int, std::string>, const Tensor*> index;
    for (const Entry& e : entries) index[{static_cast<int>(e.kind), e.name}] = &e.value;
    auto fetch = [&](Kind kind, const std::string& name, const Shape& shape) -> const Tensor& {
        const auto it = index.find({static_cast<int>(kind), name});
        if (it == index.end()) throw CorruptedRecord("checkpoint: missing tensor '" + name + "'");
        if (it->second->shape() != shape) {
            throw CorruptedRecord("checkpoint: tensor '" + name + "' has shape " + shape_to_string(it->second->shape()) +
                                  ", model expects " + shape_to_string(shape));
        }
        return *it->second;
    };
    const auto& ps = params.params();
    for (const ParameterRef& p : ps) p.var->mutable_value() = fetch(Kind::parameter, p.name, p.var->shape());
    for (const BufferRef& b : params.buffers()) *b.tensor = fetch(Kind::buffer, b.name, b.tensor->shape());
    if (momentum) {
        momentum->resize(ps.size());
        for (std::size_t i = 0; i < ps.size(); ++i) {
            (*momentum)[i] = fetch(Kind::momentum, ps[i].name, ps[i].var->shape());
        }
    }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    Writer w;
    w.str(ckpt.config_yaml);
    w.pod<std::int64_t>(ckpt.iteration);
    w.pod<std::uint64_t>(ckpt.entries.size());
    for (const auto& e : ckpt.entries) {
        w.str(e.name);
        w.pod<std::uint8_t>(static_cast<std::uint8_t>(e.kind));
        w.tensor(e.value);
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(kMagic, sizeof(kMagic));
        const std::uint32_t version = kVersion;
        const std::uint64_t size = w.bytes().size(), sum = fnv1a(w.bytes());
        out.write(reinterpret_cast<const char*>(&version), sizeof(version));
        out.write(reinterpret_cast<const char*>(&size), sizeof(size));
        out.write(reinterpret_cast<const char*>(&sum), sizeof(sum));
        out.write(w.bytes().data(), static_cast<std::streamsize>(size));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string file = ss.str();
    constexpr std::size_t head = sizeof(kMagic) + sizeof(std::uint32_t) + 2 * sizeof(std::uint64_t);
    if (file.size() < head || std::memcmp(file.data(), kMagic, sizeof(kMagic)) != 0) {
        throw CorruptedRecord(path.string() + ": not a checkpoint");
    }
    std::uint32_t version;
    std::uint64_t size, sum;
    std::memcpy(&version, file.data() + 8, 4);
    std::memcpy(&size, file.data() + 12, 8);
    std::memcpy(&sum, file.data() + 20, 8);
    if (version != kVersion) throw CorruptedRecord(path.string() + ": unsupported version " + std::to_string(version));
    if (file.size() - head != size) throw CorruptedRecord(path.string() + ": truncated");
    const std::string payload = file.substr(head);
    if (fnv1a(payload) != sum) throw CorruptedRecord(path.string() + ": checksum mismatch");
    Reader r(payload);
    Checkpoint c;
    c.config_yaml = r.str();
    c.iteration = r.pod<std::int64_t>();
    const auto n = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
        Checkpoint::Entry e;
        e.name = r.str();
        const auto kind = r.pod<std::uint8_t>();
        if (kind > 2) throw CorruptedRecord(path.string() + ": bad entry kind");
        e.kind = static_cast<Checkpoint::Kind>(kind);
        e.value = r.tensor();
        c.entries.push_back(std::move(e));
    }
    if (!r.done()) throw CorruptedRecord(path.string() + ": trailing bytes");
    return c;
}

}  // namespace nextou
