#include "cbvp/dataset_io.hpp"

#include "cbvp/config.hpp"
#include "cbvp/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

namespace cbvp {

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'B', 'V', 'P'};

std::string read_all(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw IoError("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_all(const std::filesystem::path& path, const std::string& bytes)
{
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
        throw IoError("cannot open " + path.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f)
        throw IoError("write failed for " + path.string());
}

template <typename T>
void put(std::string& out, T v)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& bytes, std::size_t offset)
{
    T v;
    std::memcpy(&v, bytes.data() + offset, sizeof(T));
    return v;
}

BinaryArray pack(const std::vector<const Trajectory*>& trajs, std::size_t n_steps)
{
    BinaryArray a;
    a.header = {kDatasetFormatVersion, trajs.size(), n_steps, 6};
    a.values.reserve(trajs.size() * n_steps * 6);
    for (const Trajectory* t : trajs) {
        if (t->size() != n_steps)
            throw ShapeError("trajectories in one file must share a length");
        for (const auto& s : t->states)
            a.values.insert(a.values.end(), s.v.begin(), s.v.end());
    }
    return a;
}

Trajectory unpack(const BinaryArray& a, std::size_t index, double t0, double dt)
{
    Trajectory t;
    t.t0 = t0;
    t.dt = dt;
    const std::size_t n = a.header.n_steps;
    t.states.resize(n);
    const double* base = a.values.data() + index * n * 6;
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(base + i * 6, 6, t.states[i].v.begin());
    return t;
}

Json meta_json(const TrajectoryMeta& m)
{
    return Json{{"vinf_kms", m.vinf_kms},
                {"post_flyby_angle_deg", m.post_flyby_angle_deg},
                {"seed", m.seed},
                {"anchor_epoch", m.anchor_epoch},
                {"backward", m.backward}};
}

TrajectoryMeta meta_from(const Json& j)
{
    TrajectoryMeta m;
    m.vinf_kms = j.at("vinf_kms").get<double>();
    m.post_flyby_angle_deg = j.at("post_flyby_angle_deg").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.anchor_epoch = j.at("anchor_epoch").get<double>();
    m.backward = j.at("backward").get<bool>();
    return m;
}

} // namespace

void write_binary_array(const std::filesystem::path& path, const BinaryArray& array)
{
    const auto& h = array.header;
    if (h.n_samples * h.n_steps * h.n_channels != array.values.size())
        throw ShapeError("binary array payload does not match its header");
    std::string bytes(kMagic, 4);
    put<std::uint32_t>(bytes, h.version);
    put<std::uint64_t>(bytes, h.n_samples);
    put<std::uint64_t>(bytes, h.n_steps);
    put<std::uint64_t>(bytes, h.n_channels);
    bytes.reserve(bytes.size() + array.values.size() * sizeof(double));
    for (double v : array.values)
        put<double>(bytes, v);
    write_all(path, bytes);
}

BinaryArray read_binary_array(const std::filesystem::path& path)
{
    const std::string bytes = read_all(path);
    if (bytes.size() < kBinaryHeaderBytes || bytes.compare(0, 4, kMagic, 4) != 0)
        throw FormatError(path.string() + " is not a dataset array file");
    BinaryArray a;
    a.header.version = get<std::uint32_t>(bytes, 4);
    if (a.header.version != kDatasetFormatVersion)
        throw FormatError(path.string() + ": unsupported format version " + std::to_string(a.header.version));
    a.header.n_samples = get<std::uint64_t>(bytes, 8);
    a.header.n_steps = get<std::uint64_t>(bytes, 16);
    a.header.n_channels = get<std::uint64_t>(bytes, 24);
    const std::size_t n = a.header.n_samples * a.header.n_steps * a.header.n_channels;
    if (bytes.size() != kBinaryHeaderBytes + n * sizeof(double))
        throw FormatError(path.string() + ": payload size does not match its header");
    a.values.resize(n);
    std::memcpy(a.values.data(), bytes.data() + kBinaryHeaderBytes, n * sizeof(double));
    return a;
}

std::string sha256_bytes(std::span<const std::uint8_t> bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
        throw IoError("SHA-256 computation failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path)
{
    const std::string bytes = read_all(path);
    return sha256_bytes({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
}

std::string write_dataset(const Dataset& ds, const std::filesystem::path& dir)
{
    if (ds.contexts.empty())
        throw ShapeError("dataset has no reference context");
    std::filesystem::create_directories(dir);

    const std::size_t ctx_steps = ds.contexts.front().size();
    std::vector<const Trajectory*> ctx_ptrs;
    for (const auto& c : ds.contexts)
        ctx_ptrs.push_back(&c);
    write_binary_array(dir / "context.traj", pack(ctx_ptrs, ctx_steps));

    std::size_t fwd_steps = 0;
    for (const auto& split : ds.splits) {
        if (!split.empty())
            fwd_steps = split.front().forward.size();
    }

    Json files = Json::object();
    files["context.traj"] = sha256_file(dir / "context.traj");
    Json counts = Json::object();
    Json samples = Json::object();
    for (std::size_t s = 0; s < 3; ++s) {
        const std::string name = split_name(static_cast<Split>(s));
        const auto& split = ds.splits[s];
        std::vector<const Trajectory*> fwd;
        BinaryArray prefix;
        prefix.header = {kDatasetFormatVersion, split.size(), 1, 6};
        Json meta = Json::array();
        for (const auto& sample : split) {
            fwd.push_back(&sample.forward);
            prefix.values.insert(prefix.values.end(), sample.prefix.r0.begin(), sample.prefix.r0.end());
            prefix.values.insert(prefix.values.end(), sample.prefix.rf.begin(), sample.prefix.rf.end());
            Json m = meta_json(sample.forward.meta);
            m["context_index"] = sample.context_index;
            m["turn_angle_deg"] = sample.turn_angle_deg;
            meta.push_back(std::move(m));
        }
        write_binary_array(dir / (name + ".traj"), pack(fwd, fwd_steps));
        write_binary_array(dir / (name + ".prefix"), prefix);
        files[name + ".traj"] = sha256_file(dir / (name + ".traj"));
        files[name + ".prefix"] = sha256_file(dir / (name + ".prefix"));
        counts[name] = split.size();
        samples[name] = std::move(meta);
    }

    Json contexts = Json::array();
    for (const auto& c : ds.contexts) {
        Json m = meta_json(c.meta);
        m["t0"] = c.t0;
        m["dt"] = c.dt;
        contexts.push_back(std::move(m));
    }
    Json incoming = Json::array();
    for (const auto& inc : ds.incoming) {
        incoming.push_back(Json{{"magnitude_kms", inc.candidate.magnitude_kms},
                                {"direction_deg", inc.candidate.direction_deg},
                                {"vinf_kms", inc.vinf_kms},
                                {"min_earth_distance_km", inc.min_earth_distance_km}});
    }
    Json classes = Json::array();
    for (const auto& c : ds.classes) {
        classes.push_back(Json{{"vinf_kms", c.vinf_kms},
                               {"max_deflection_deg", c.max_deflection_deg},
                               {"emitted", c.emitted},
                               {"rejected", c.rejected}});
    }
    Json rejections = Json::array();
    for (const auto& r : ds.rejections)
        rejections.push_back(Json{{"vinf_kms", r.vinf_kms}, {"angle_deg", r.angle_deg}, {"reason", r.reason}});

    double fwd_t0 = 0.0;
    for (const auto& split : ds.splits) {
        if (!split.empty())
            fwd_t0 = split.front().forward.t0;
    }

    Json manifest;
    manifest["format_version"] = kDatasetFormatVersion;
    manifest["counts"] = counts;
    manifest["split_ratios"] = ds.flyby.split_ratios;
    Json norm = to_json(ds.normalizer);
    norm["loss_units"] = "normalized";
    manifest["normalization"] = norm;
    manifest["geometry"] = Json{{"context_steps", ctx_steps},
                                {"forward_steps", fwd_steps},
                                {"dt", ds.contexts.front().dt},
                                {"dt_s", ds.contexts.front().dt * ds.constants.time_unit_s},
                                {"forward_t0", fwd_t0},
                                {"n_channels", 6}};
    manifest["flyby"] = to_json(ds.flyby);
    manifest["constants"] = to_json(ds.constants);
    manifest["integrator"] = to_json(ds.integrator);
    manifest["incoming"] = incoming;
    manifest["classes"] = classes;
    manifest["rejections"] = rejections;
    manifest["contexts"] = contexts;
    manifest["samples"] = samples;
    manifest["files"] = files;

    const std::string text = manifest.dump(2) + "\n";
    write_all(dir / "manifest.json", text);
    return text;
}

Dataset read_dataset(const std::filesystem::path& dir)
{
    Json manifest;
    try {
        manifest = Json::parse(read_all(dir / "manifest.json"));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }

    try {
        if (manifest.at("format_version").get<std::uint32_t>() != kDatasetFormatVersion)
            throw FormatError("unsupported dataset format version");

        for (const auto& [name, digest] : manifest.at("files").items()) {
            const std::string actual = sha256_file(dir / name);
            if (actual != digest.get<std::string>())
                throw FormatError("checksum mismatch for " + name);
        }

        Dataset ds;
        read_json(manifest.at("flyby"), ds.flyby);
        read_json(manifest.at("constants"), ds.constants);
        read_json(manifest.at("integrator"), ds.integrator);
        ds.normalizer = normalizer_from_json(manifest.at("normalization"));

        const auto ctx = read_binary_array(dir / "context.traj");
        const auto& ctx_meta = manifest.at("contexts");
        if (ctx.header.n_samples != ctx_meta.size() || ctx.header.n_channels != 6)
            throw FormatError("context.traj does not match the manifest");
        for (std::size_t i = 0; i < ctx_meta.size(); ++i) {
            Trajectory t = unpack(ctx, i, ctx_meta[i].at("t0").get<double>(), ctx_meta[i].at("dt").get<double>());
            t.meta = meta_from(ctx_meta[i]);
            ds.contexts.push_back(std::move(t));
        }

        const auto& geometry = manifest.at("geometry");
        const double dt = geometry.at("dt").get<double>();
        const double fwd_t0 = geometry.at("forward_t0").get<double>();
        for (std::size_t s = 0; s < 3; ++s) {
            const std::string name = split_name(static_cast<Split>(s));
            const auto fwd = read_binary_array(dir / (name + ".traj"));
            const auto prefix = read_binary_array(dir / (name + ".prefix"));
            const auto& meta = manifest.at("samples").at(name);
            const std::size_t n = manifest.at("counts").at(name).get<std::size_t>();
            if (fwd.header.n_samples != n || prefix.header.n_samples != n || meta.size() != n ||
                fwd.header.n_channels != 6 || prefix.header.n_steps * prefix.header.n_channels != 6)
                throw FormatError(name + " files do not match the manifest counts");
            for (std::size_t i = 0; i < n; ++i) {
                FamilySample sample;
                sample.forward = unpack(fwd, i, fwd_t0, dt);
                sample.forward.meta = meta_from(meta[i]);
                sample.context_index = meta[i].at("context_index").get<std::size_t>();
                sample.turn_angle_deg = meta[i].at("turn_angle_deg").get<double>();
                if (sample.context_index >= ds.contexts.size())
                    throw FormatError(name + " sample refers to a missing context");
                const double* pv = prefix.values.data() + i * 6;
                sample.prefix.r0 = {pv[0], pv[1], pv[2]};
                sample.prefix.rf = {pv[3], pv[4], pv[5]};
                sample.prefix.v0 = ds.contexts[sample.context_index].front().velocity();
                sample.prefix.vf = sample.forward.back().velocity();
                if (sample.prefix.rf != sample.forward.back().position() ||
                    sample.prefix.r0 != ds.contexts[sample.context_index].front().position())
                    throw FormatError(name + " prefix does not match its trajectories");
                ds.splits[s].push_back(std::move(sample));
            }
        }

        for (const auto& inc : manifest.at("incoming")) {
            IncomingSolution sol;
            sol.candidate = {inc.at("magnitude_kms").get<double>(), inc.at("direction_deg").get<double>()};
            sol.vinf_kms = inc.at("vinf_kms").get<Vec3>();
            sol.min_earth_distance_km = inc.at("min_earth_distance_km").get<double>();
            ds.incoming.push_back(sol);
        }
        for (const auto& c : manifest.at("classes")) {
            ds.classes.push_back({c.at("vinf_kms").get<double>(), c.at("max_deflection_deg").get<double>(),
                                  c.at("emitted").get<std::size_t>(), c.at("rejected").get<std::size_t>()});
        }
        for (const auto& r : manifest.at("rejections")) {
            ds.rejections.push_back(
                {r.at("vinf_kms").get<double>(), r.at("angle_deg").get<double>(), r.at("reason").get<std::string>()});
        }
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("manifest has invalid configuration: ") + e.what());
    }
}

} // namespace cbvp
