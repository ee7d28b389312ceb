#include <doctest.h>

#include "metric_oracles.hpp"
#include "slmprop/error.hpp"
#include "slmprop/metrics/metrics.hpp"

using namespace slmprop;
using namespace slmprop::metrics;
using io::Dims;
using io::MaskVolume;
using io::Spacing;

namespace {

MaskVolume present_on(const Dims& d, const std::vector<int64_t>& slices) {
    MaskVolume m(d, Spacing{});
    for (int64_t z : slices) m.set(z, d.height / 2, d.width / 2, 1);
    m.declare_object(1);
    return m;
}

std::vector<int64_t> span_of(int64_t lo, int64_t hi) {
    std::vector<int64_t> v;
    for (int64_t z = lo; z <= hi; ++z) v.push_back(z);
    return v;
}

} // namespace

TEST_CASE("dsc examples") {
    std::vector<uint8_t> a(16, 0), b(16, 0);
    CHECK(dsc(a, b) == 1.0);
    a[0] = a[1] = a[2] = a[3] = 1;
    CHECK(dsc(a, a) == 1.0);
    CHECK(dsc(a, b) == 0.0);
    b[2] = b[3] = b[4] = b[5] = 1;
    CHECK(dsc(a, b) == 0.5);
    std::vector<uint8_t> c(10, 1);
    CHECK_THROWS_AS(dsc(a, c), Error);
    MaskVolume m1(Dims{2, 2, 2}, Spacing{}), m2(Dims{2, 2, 3}, Spacing{});
    CHECK_THROWS_AS(dsc(m1, m2, 1), Error);
}

TEST_CASE("assd examples") {
    MaskVolume a(Dims{3, 3, 8}, Spacing{}), b(Dims{3, 3, 8}, Spacing{});
    a.set(1, 1, 1, 1);
    b.set(1, 1, 4, 1);
    CHECK(*assd(a, b, 1) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(*assd(a, a, 1) == 0.0);

    MaskVolume c(Dims{4, 3, 3}, Spacing{2.0f, 1.0f, 1.0f}), e(Dims{4, 3, 3}, Spacing{2.0f, 1.0f, 1.0f});
    c.set(1, 1, 1, 1);
    e.set(2, 1, 1, 1);
    CHECK(*assd(c, e, 1) == doctest::Approx(2.0).epsilon(1e-12));

    MaskVolume empty(Dims{3, 3, 8}, Spacing{});
    CHECK(!assd(a, empty, 1).has_value());
    CHECK(!assd(empty, empty, 1).has_value());
}

TEST_CASE("surface of a solid cube is its shell") {
    Dims d{5, 5, 5};
    std::vector<uint8_t> m(125, 0);
    for (int z = 1; z < 4; ++z)
        for (int y = 1; y < 4; ++y)
            for (int x = 1; x < 4; ++x) m[static_cast<size_t>(z * 25 + y * 5 + x)] = 1;
    CHECK(surface_voxels(m, d).size() == 26);
    std::vector<uint8_t> full(125, 1);
    CHECK(surface_voxels(full, d).size() == 125 - 27);
}

TEST_CASE("slice partition") {
    Dims d{12, 4, 4};
    MaskVolume gt = present_on(d, span_of(2, 9));
    SlicePartition p = slice_dsc_partition(gt, gt, 1);
    CHECK(p.present.size() == 8);
    CHECK(p.absent.size() == 4);
    for (auto& [z, v] : p.present) CHECK(v == 1.0);
    for (auto& [z, v] : p.absent) CHECK(v == 1.0);

    MaskVolume over = present_on(d, span_of(2, 10));
    p = slice_dsc_partition(over, gt, 1);
    for (auto& [z, v] : p.absent) CHECK(v == (z == 10 ? 0.0 : 1.0));
}

TEST_CASE("fnsr and pfnsr") {
    Dims d{14, 3, 3};
    MaskVolume gt = present_on(d, span_of(2, 11));
    auto r = fnsr_pfnsr(gt, gt, 1);
    CHECK(r.fnsr == 0.0);
    CHECK(r.pfnsr == 0.0);

    r = fnsr_pfnsr(present_on(d, span_of(2, 9)), gt, 1);
    CHECK(r.fnsr == doctest::Approx(0.2));
    CHECK(r.pfnsr == doctest::Approx(0.2));

    auto interior = span_of(2, 11);
    interior.erase(interior.begin() + 4);
    r = fnsr_pfnsr(present_on(d, interior), gt, 1);
    CHECK(r.fnsr == doctest::Approx(0.1));
    CHECK(r.pfnsr == 0.0);

    r = fnsr_pfnsr(MaskVolume(d, Spacing{}), gt, 1);
    CHECK(r.fnsr == 1.0);
    CHECK(r.pfnsr == 1.0);

    CHECK_THROWS_AS(fnsr_pfnsr(gt, MaskVolume(d, Spacing{}), 1), Error);
}

TEST_CASE("saved effort") {
    auto s = saved_effort(342.05, 203.40, 0.23142, 0.17128);
    CHECK(s.spv_saved == doctest::Approx(0.40535).epsilon(1e-4));
    CHECK(s.csr_saved == doctest::Approx(0.25987).epsilon(1e-4));
    CHECK(saved_effort(515.10, 21.93, 0.42191, 0.01587).spv_saved == doctest::Approx(0.95743).epsilon(1e-4));
    s = saved_effort(3.0, 3.0, 0.5, 0.5);
    CHECK(s.spv_saved == 0.0);
    CHECK(s.csr_saved == 0.0);
    try {
        saved_effort(0.0, 1.0, 0.5, 0.1);
        FAIL("expected ZeroBaseline");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ZeroBaseline);
    }
}

TEST_CASE("bootstrap") {
    auto c = bootstrap_ci(std::vector<double>(10, 0.8), 1000, 1);
    CHECK(c.mean == doctest::Approx(0.8));
    CHECK(c.lo == doctest::Approx(0.8));
    CHECK(c.hi == doctest::Approx(0.8));
    nn::Rng rng(2);
    for (int t = 0; t < 30; ++t) {
        std::vector<double> v(static_cast<size_t>(rng.uniform_int(2, 30)));
        for (auto& x : v) x = rng.uniform() * rng.uniform();
        auto a = bootstrap_ci(v, 500, 7), b = bootstrap_ci(v, 500, 7);
        CHECK(a.lo <= a.mean);
        CHECK(a.mean <= a.hi);
        CHECK(a.lo == b.lo);
        CHECK(a.hi == b.hi);
    }
    try {
        bootstrap_ci({0.5}, 100, 0);
        FAIL("expected TooFewValues");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::TooFewValues);
    }
}

TEST_CASE("random pairs match the brute-force oracles") {
    auto st = testsupport::run_metric_trials(150, 11, 12);
    CHECK(st.dsc_mismatch == 0);
    CHECK(st.assd_mismatch == 0);
    CHECK(st.fn_mismatch == 0);
    CHECK(st.symmetry_failures == 0);
    CHECK(st.ordering_failures == 0);
    CHECK(st.max_assd_error < 1e-9);
}

TEST_CASE("report and serialization") {
    Dims d{10, 6, 6};
    MaskVolume gt = present_on(d, span_of(2, 7));
    MaskVolume pred = present_on(d, span_of(3, 8));
    MetricsReport r = compute_report(pred, gt, 1);
    CHECK(r.fn.fnsr == doctest::Approx(1.0 / 6));
    CHECK(r.fn.pfnsr == doctest::Approx(1.0 / 6));
    CHECK(r.absent_dsc_mean.has_value());
    auto j = to_json(r);
    CHECK(j.at("assd_units") == "physical");
    CHECK(j.at("present_slices").size() == 6);
    std::string csv = to_csv({r});
    CHECK(csv.rfind("volume,object_id,slice,gt_present,dsc\n", 0) == 0);
    CHECK(to_csv({r, r}).find("\n1,") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
    CHECK(to_csv({r}) == csv);

    AggregateReport a = aggregate({r, compute_report(gt, gt, 1)}, 200, 3);
    CHECK(a.volumes == 2);
    CHECK(a.dsc_3d.lo <= a.dsc_3d.hi);
    CHECK(to_json(a).dump() == to_json(aggregate({r, compute_report(gt, gt, 1)}, 200, 3)).dump());
}
