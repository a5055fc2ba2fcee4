#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "rsp/error.hpp"
#include "rsp/io.hpp"
#include "rsp/rng.hpp"

using namespace rsp;

TEST_CASE("counter rng is random access and stream-separated") {
    CounterRng a(42), b(42), c(42, 1), d(43);
    for (std::uint64_t n = 0; n < 100; ++n) {
        const auto v = a.next();
        CHECK(v == b.at(n));
        CHECK(v != c.at(n));
        CHECK(v != d.at(n));
    }
    CHECK(a.counter() == 100);
    CHECK(b.counter() == 0);
}

TEST_CASE("counter rng distributions") {
    CounterRng r(7);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        CHECK_UNARY(u >= 0.0);
        CHECK_UNARY(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 5 * std::sqrt(1.0 / 12 / n));

    // Chi-square over a bound that is not a power of two.
    std::vector<int> counts(10, 0);
    for (int i = 0; i < n; ++i) ++counts[r.below(10)];
    double chi = 0.0;
    for (const int k : counts) chi += (k - n / 10.0) * (k - n / 10.0) / (n / 10.0);
    CHECK(chi < 27.9);  // 0.999 quantile, 9 degrees of freedom

    sum = sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.015);
    CHECK(std::abs(sq / n - 1.0) < 0.02);

    int plus = 0;
    for (int i = 0; i < n; ++i) plus += r.sign() > 0;
    CHECK(std::abs(plus - n / 2) < 5 * std::sqrt(n / 4.0));
    CHECK(r.below(1) == 0);
}

TEST_CASE("derived seeds separate labels and indices") {
    std::set<std::uint64_t> seen;
    for (const char* label : {"a", "b", "probe.init", "probe.target"})
        for (std::uint64_t i = 0; i < 50; ++i) seen.insert(derive_seed(1, label, i));
    CHECK(seen.size() == 200);
    CHECK(derive_seed(1, "a", 3) == derive_seed(1, "a", 3));
    CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("base64 known vectors and round trip") {
    const std::vector<std::pair<std::string, std::string>> cases{
        {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
        {"foobar", "Zm9vYmFy"}};
    for (const auto& [plain, enc] : cases) {
        const std::vector<std::uint8_t> bytes(plain.begin(), plain.end());
        CHECK(base64_encode(bytes) == enc);
        CHECK(base64_decode(enc) == bytes);
    }
    std::vector<std::uint8_t> all(256);
    for (int i = 0; i < 256; ++i) all[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i);
    CHECK(base64_decode(base64_encode(all)) == all);
    CHECK_THROWS_AS(base64_decode("Zm9v!"), FormatError);
    CHECK_THROWS_AS(base64_decode("Zm9"), FormatError);
}

TEST_CASE("file helpers") {
    const auto dir = std::filesystem::temp_directory_path() / "rsp-unit-io" / "nested";
    std::filesystem::remove_all(dir.parent_path());
    const auto path = (dir / "x.bin").string();
    const std::string payload("a\0b\nc", 5);
    write_file(path, payload);
    CHECK(read_file(path) == payload);
    CHECK_THROWS_AS(read_file(path + ".missing"), Error);
    const auto ts = utc_timestamp();
    CHECK(ts.size() == 20);
    CHECK(ts.back() == 'Z');
}
