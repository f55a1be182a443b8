#include "cbvp/checkpoint.hpp"

#include "cbvp/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <type_traits>

namespace cbvp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};
constexpr std::size_t kHeaderBytes = 24;

template <typename T>
void put(std::string& out, T value)
{
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

class Cursor {
public:
    Cursor(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    template <typename T>
    T get()
    {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::string take(std::size_t n)
    {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    void seek(std::size_t p) { pos_ = p; }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > end_)
            throw FormatError("checkpoint truncated");
    }

    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

} // namespace

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ckpt)
{
    std::string body;
    for (const auto& t : ckpt.tensors) {
        if (tensor::numel(t.shape) != t.values.size())
            throw ShapeError("checkpoint tensor '" + t.name + "' has inconsistent shape");
        put<std::uint32_t>(body, static_cast<std::uint32_t>(t.name.size()));
        body += t.name;
        put<std::uint8_t>(body, static_cast<std::uint8_t>(t.dtype));
        put<std::uint32_t>(body, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape)
            put<std::uint64_t>(body, d);
        for (double v : t.values) {
            if (t.dtype == DType::Float32)
                put<float>(body, static_cast<float>(v));
            else
                put<double>(body, v);
        }
    }
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, ckpt.tensors.size());
    put<std::uint64_t>(out, kHeaderBytes + body.size());
    out += body;
    out += ckpt.trailer;

    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path).concat(".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f)
            throw IoError("cannot open " + tmp.string() + " for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f)
            throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw IoError("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < kHeaderBytes || bytes.compare(0, 4, kMagic, 4) != 0)
        throw FormatError(path.string() + " is not a checkpoint file");

    Cursor head(bytes, bytes.size());
    head.seek(4);
    const auto version = head.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = head.get<std::uint64_t>();
    const auto trailer_offset = head.get<std::uint64_t>();
    if (trailer_offset < kHeaderBytes || trailer_offset > bytes.size())
        throw FormatError("checkpoint trailer offset out of range");

    CheckpointFile ckpt;
    Cursor c(bytes, trailer_offset);
    c.seek(kHeaderBytes);
    for (std::uint64_t i = 0; i < count; ++i) {
        TensorRecord t;
        t.name = c.take(c.get<std::uint32_t>());
        const auto tag = c.get<std::uint8_t>();
        if (tag != static_cast<std::uint8_t>(DType::Float32) && tag != static_cast<std::uint8_t>(DType::Float64))
            throw FormatError("unknown dtype tag for tensor '" + t.name + "'");
        t.dtype = static_cast<DType>(tag);
        const auto rank = c.get<std::uint32_t>();
        for (std::uint32_t r = 0; r < rank; ++r)
            t.shape.push_back(c.get<std::uint64_t>());
        const std::size_t n = tensor::numel(t.shape);
        t.values.resize(n);
        for (std::size_t k = 0; k < n; ++k)
            t.values[k] = t.dtype == DType::Float32 ? static_cast<double>(c.get<float>()) : c.get<double>();
        ckpt.tensors.push_back(std::move(t));
    }
    if (c.pos() != trailer_offset)
        throw FormatError("checkpoint tensor section does not end at the trailer offset");
    ckpt.trailer = bytes.substr(trailer_offset);
    return ckpt;
}

template <typename Real>
std::vector<TensorRecord> to_records(const tensor::ParamMap<Real>& params)
{
    std::vector<TensorRecord> out;
    for (const auto& [name, t] : params) {
        out.push_back({name, std::is_same_v<Real, float> ? DType::Float32 : DType::Float64, t.shape(),
                       std::vector<double>(t.data().begin(), t.data().end())});
    }
    return out;
}

template <typename Real>
tensor::ParamMap<Real> from_records(const std::vector<TensorRecord>& records)
{
    tensor::ParamMap<Real> out;
    for (const auto& r : records) {
        std::vector<Real> values(r.values.size());
        for (std::size_t i = 0; i < values.size(); ++i)
            values[i] = static_cast<Real>(r.values[i]);
        out.emplace(r.name, tensor::Tensor<Real>(r.shape, std::move(values), true));
    }
    return out;
}

template std::vector<TensorRecord> to_records(const tensor::ParamMap<float>&);
template std::vector<TensorRecord> to_records(const tensor::ParamMap<double>&);
template tensor::ParamMap<float> from_records(const std::vector<TensorRecord>&);
template tensor::ParamMap<double> from_records(const std::vector<TensorRecord>&);

} // namespace cbvp
