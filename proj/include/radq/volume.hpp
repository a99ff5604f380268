#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace radq {

// Single-modality 3D scalar grid. Data is row-major with x fastest:
// index = x + nx * (y + ny * z). Values are 32-bit floats end to end so the
// on-disk format round-trips bit-exactly.
struct Volume {
    std::string modality_id;
    int nx = 0, ny = 0, nz = 0;
    std::array<double, 3> voxel_size_mm{1.0, 1.0, 1.0};
    std::vector<float> data;
    // Free-form provenance entries (e.g. the CDI discretization tag).
    std::map<std::string, std::string> meta;

    Volume() = default;
    Volume(std::string id, int nx_, int ny_, int nz_, std::array<double, 3> vox = {1.0, 1.0, 1.0});

    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * z);
    }
    float& at(int x, int y, int z) { return data[index(x, y, z)]; }
    float at(int x, int y, int z) const { return data[index(x, y, z)]; }
    std::size_t voxel_count() const { return static_cast<std::size_t>(nx) * ny * nz; }
    bool same_dims(const Volume& o) const { return nx == o.nx && ny == o.ny && nz == o.nz; }

    // Throws ParseError naming the violated invariant (dims, voxel sizes,
    // payload length, first non-finite voxel index).
    void validate() const;
    // Additionally requires every voxel to be exactly 0.0f or 1.0f.
    void validate_as_mask() const;
};

// All modalities plus masks for one patient. Immutable after load.
struct PatientCase {
    std::string patient_id;
    int age_years = 0;
    Volume t2w;
    // Ordered by b ascending; first entry must be b = 0.
    std::vector<std::pair<double, Volume>> dwi_by_b;
    Volume adc;
    Volume chb_dwi;
    Volume cdi;
    Volume prostate_mask;
    Volume tumour_mask;

    void validate() const;
};

struct CohortManifest {
    struct Entry {
        std::string patient_id;
        std::string path; // case directory, relative to the manifest
    };
    std::vector<Entry> cases;
    std::uint64_t seed = 0;
    std::string format_version = "cohort-v1";
};

// .vol file: one UTF-8 JSON header line terminated by '\n', then the raw
// little-endian IEEE-754 float32 payload in row-major x-fastest order.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

// Case directory: case.json plus one .vol per volume.
void save_case(const PatientCase& pc, const std::filesystem::path& dir);
PatientCase load_case(const std::filesystem::path& dir);

void save_cohort(const CohortManifest& m, const std::filesystem::path& path);
CohortManifest load_cohort(const std::filesystem::path& path); // checks referenced files exist

} // namespace radq
