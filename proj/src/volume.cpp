#include "radq/volume.hpp"

#include "radq/error.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

namespace radq {

using nlohmann::json;

Volume::Volume(std::string id, int nx_, int ny_, int nz_, std::array<double, 3> vox)
    : modality_id(std::move(id)), nx(nx_), ny(ny_), nz(nz_), voxel_size_mm(vox),
      data(static_cast<std::size_t>(nx_) * ny_ * nz_, 0.0f) {}

void Volume::validate() const {
    if (nx <= 0 || ny <= 0 || nz <= 0)
        throw ParseError("volume '" + modality_id + "': dims must be positive");
    for (double s : voxel_size_mm)
        if (!(s > 0.0) || !std::isfinite(s))
            throw ParseError("volume '" + modality_id + "': voxel sizes must be strictly positive");
    if (data.size() != voxel_count())
        throw ParseError("volume '" + modality_id + "': payload length " + std::to_string(data.size()) +
                         " does not match dims product " + std::to_string(voxel_count()));
    for (std::size_t i = 0; i < data.size(); ++i)
        if (!std::isfinite(data[i]))
            throw ParseError("volume '" + modality_id + "': non-finite value at voxel " + std::to_string(i));
}

void Volume::validate_as_mask() const {
    validate();
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data[i] != 0.0f && data[i] != 1.0f)
            throw ParseError("mask volume '" + modality_id + "': voxel " + std::to_string(i) +
                             " is neither 0 nor 1");
}

void PatientCase::validate() const {
    if (patient_id.empty()) throw ParseError("patient_id must not be empty");
    t2w.validate();
    adc.validate();
    chb_dwi.validate();
    cdi.validate();
    prostate_mask.validate_as_mask();
    tumour_mask.validate_as_mask();
    if (dwi_by_b.size() < 2) throw ParseError("case " + patient_id + ": needs at least 2 b-value volumes");
    if (dwi_by_b.front().first != 0.0)
        throw ParseError("case " + patient_id + ": first b-value must be 0");
    for (std::size_t i = 0; i < dwi_by_b.size(); ++i) {
        if (i > 0 && !(dwi_by_b[i].first > dwi_by_b[i - 1].first))
            throw ParseError("case " + patient_id + ": b-values must be strictly increasing");
        dwi_by_b[i].second.validate();
    }
    auto check_dims = [&](const Volume& v) {
        if (!v.same_dims(t2w))
            throw ParseError("case " + patient_id + ": volume '" + v.modality_id +
                             "' dims differ from t2w");
    };
    check_dims(adc);
    check_dims(chb_dwi);
    check_dims(cdi);
    check_dims(prostate_mask);
    check_dims(tumour_mask);
    for (const auto& [b, v] : dwi_by_b) check_dims(v);
    for (std::size_t i = 0; i < tumour_mask.data.size(); ++i)
        if (tumour_mask.data[i] == 1.0f && prostate_mask.data[i] != 1.0f)
            throw ParseError("case " + patient_id + ": tumour_mask voxel " + std::to_string(i) +
                             " lies outside prostate_mask");
}

namespace {

constexpr const char* kVolFormat = "vol-v1";

void put_le32(std::ofstream& out, std::uint32_t bits) {
    const unsigned char b[4] = {
        static_cast<unsigned char>(bits & 0xff),
        static_cast<unsigned char>((bits >> 8) & 0xff),
        static_cast<unsigned char>((bits >> 16) & 0xff),
        static_cast<unsigned char>((bits >> 24) & 0xff),
    };
    out.write(reinterpret_cast<const char*>(b), 4);
}

} // namespace

void write_volume(const Volume& v, const std::filesystem::path& path) {
    v.validate();
    json header;
    header["format"] = kVolFormat;
    header["modality_id"] = v.modality_id;
    header["dims"] = {v.nx, v.ny, v.nz};
    header["voxel_size_mm"] = {v.voxel_size_mm[0], v.voxel_size_mm[1], v.voxel_size_mm[2]};
    header["element_count"] = v.data.size();
    if (!v.meta.empty()) header["meta"] = v.meta;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
    out << header.dump() << '\n';
    for (float f : v.data) put_le32(out, std::bit_cast<std::uint32_t>(f));
    out.flush();
    if (!out) throw ParseError("I/O failure while writing '" + path.string() + "'");
}

Volume read_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInputError("cannot open volume file '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("'" + path.string() + "': missing header line");

    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError("'" + path.string() + "': malformed header: " + e.what());
    }

    Volume v;
    try {
        if (header.at("format").get<std::string>() != kVolFormat)
            throw ParseError("'" + path.string() + "': unknown format '" +
                             header["format"].get<std::string>() + "'");
        v.modality_id = header.at("modality_id").get<std::string>();
        const auto dims = header.at("dims");
        if (!dims.is_array() || dims.size() != 3)
            throw ParseError("'" + path.string() + "': dims must be a 3-array");
        v.nx = dims[0].get<int>();
        v.ny = dims[1].get<int>();
        v.nz = dims[2].get<int>();
        const auto vox = header.at("voxel_size_mm");
        for (int i = 0; i < 3; ++i) v.voxel_size_mm[i] = vox.at(i).get<double>();
        const auto n = header.at("element_count").get<std::uint64_t>();
        if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0)
            throw ParseError("'" + path.string() + "': dims must be positive");
        if (n != static_cast<std::uint64_t>(v.nx) * v.ny * v.nz)
            throw ParseError("'" + path.string() + "': element_count does not match dims");
        if (header.contains("meta"))
            v.meta = header["meta"].get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw ParseError("'" + path.string() + "': malformed header: " + e.what());
    }

    std::vector<char> raw(v.voxel_count() * 4);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw ParseError("'" + path.string() + "': payload length mismatch, expected " +
                         std::to_string(raw.size()) + " bytes, got " + std::to_string(in.gcount()));
    char extra;
    if (in.read(&extra, 1))
        throw ParseError("'" + path.string() + "': payload length mismatch, trailing bytes after payload");

    v.data.resize(v.voxel_count());
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const auto* b = reinterpret_cast<const unsigned char*>(raw.data() + 4 * i);
        const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                   (static_cast<std::uint32_t>(b[2]) << 16) |
                                   (static_cast<std::uint32_t>(b[3]) << 24);
        v.data[i] = std::bit_cast<float>(bits);
    }
    v.validate();
    return v;
}

namespace {

constexpr const char* kCaseFormat = "case-v1";

std::string dwi_file_name(std::size_t i) { return "dwi_" + std::to_string(i) + ".vol"; }

} // namespace

void save_case(const PatientCase& pc, const std::filesystem::path& dir) {
    pc.validate();
    std::filesystem::create_directories(dir);
    json meta;
    meta["format"] = kCaseFormat;
    meta["patient_id"] = pc.patient_id;
    meta["age_years"] = pc.age_years;
    json bvals = json::array();
    for (const auto& [b, v] : pc.dwi_by_b) bvals.push_back(b);
    meta["b_values"] = bvals;

    write_volume(pc.t2w, dir / "t2w.vol");
    write_volume(pc.adc, dir / "adc.vol");
    write_volume(pc.chb_dwi, dir / "chb_dwi.vol");
    write_volume(pc.cdi, dir / "cdi.vol");
    write_volume(pc.prostate_mask, dir / "prostate_mask.vol");
    write_volume(pc.tumour_mask, dir / "tumour_mask.vol");
    for (std::size_t i = 0; i < pc.dwi_by_b.size(); ++i)
        write_volume(pc.dwi_by_b[i].second, dir / dwi_file_name(i));

    std::ofstream out(dir / "case.json", std::ios::trunc);
    if (!out) throw ParseError("cannot write case.json in '" + dir.string() + "'");
    out << meta.dump(2) << '\n';
}

PatientCase load_case(const std::filesystem::path& dir) {
    const auto meta_path = dir / "case.json";
    std::ifstream in(meta_path);
    if (!in) throw MissingInputError("missing case manifest '" + meta_path.string() + "'");
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        throw ParseError("'" + meta_path.string() + "': " + e.what());
    }

    PatientCase pc;
    try {
        if (meta.at("format").get<std::string>() != kCaseFormat)
            throw ParseError("'" + meta_path.string() + "': unknown case format");
        pc.patient_id = meta.at("patient_id").get<std::string>();
        pc.age_years = meta.at("age_years").get<int>();
        const auto bvals = meta.at("b_values").get<std::vector<double>>();
        pc.t2w = read_volume(dir / "t2w.vol");
        pc.adc = read_volume(dir / "adc.vol");
        pc.chb_dwi = read_volume(dir / "chb_dwi.vol");
        pc.cdi = read_volume(dir / "cdi.vol");
        pc.prostate_mask = read_volume(dir / "prostate_mask.vol");
        pc.tumour_mask = read_volume(dir / "tumour_mask.vol");
        for (std::size_t i = 0; i < bvals.size(); ++i)
            pc.dwi_by_b.emplace_back(bvals[i], read_volume(dir / dwi_file_name(i)));
    } catch (const json::exception& e) {
        throw ParseError("'" + meta_path.string() + "': " + e.what());
    }
    pc.validate();
    return pc;
}

void save_cohort(const CohortManifest& m, const std::filesystem::path& path) {
    json j;
    j["format_version"] = m.format_version;
    j["seed"] = m.seed;
    json cases = json::array();
    for (const auto& e : m.cases) cases.push_back({{"patient_id", e.patient_id}, {"path", e.path}});
    j["cases"] = cases;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot write cohort manifest '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

CohortManifest load_cohort(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("missing cohort manifest '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("'" + path.string() + "': " + e.what());
    }
    CohortManifest m;
    try {
        m.format_version = j.at("format_version").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& e : j.at("cases")) {
            m.cases.push_back({e.at("patient_id").get<std::string>(), e.at("path").get<std::string>()});
        }
    } catch (const json::exception& e) {
        throw ParseError("'" + path.string() + "': " + e.what());
    }
    const auto base = path.parent_path();
    std::map<std::string, int> seen;
    for (const auto& e : m.cases) {
        if (seen[e.patient_id]++)
            throw ParseError("cohort '" + path.string() + "': duplicate patient_id '" + e.patient_id + "'");
        if (!std::filesystem::exists(base / e.path / "case.json"))
            throw MissingInputError("cohort '" + path.string() + "': case for '" + e.patient_id +
                                    "' not found at '" + (base / e.path).string() + "'");
    }
    return m;
}

} // namespace radq
