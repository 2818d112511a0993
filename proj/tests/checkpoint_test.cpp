#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mpq/checkpoint.hpp"
#include "mpq/errors.hpp"

namespace mpq {
namespace {

namespace fs = std::filesystem;

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab = 9;
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.max_len = 12;
    return c;
}

fs::path temp_path(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mpq_checkpoint_test";
    fs::create_directories(dir);
    return dir / name;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

TEST(Checkpoint, ModelRoundTripIsExact) {
    TransformerLM model(tiny_config(), 5);
    const fs::path p = temp_path("model.bin");
    save_model(p, model);
    TransformerLM loaded = load_model(p);
    EXPECT_EQ(loaded.config(), model.config());
    const auto a = model.parameters(), b = loaded.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
        EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()));
    }
    const std::vector<std::size_t> tokens{1, 4, 2, 8, 0, 3};
    EXPECT_EQ(perplexity(model, tokens), perplexity(loaded, tokens));
}

TEST(Checkpoint, SavingTwiceIsByteIdentical) {
    TransformerLM model(tiny_config(), 6);
    save_model(temp_path("a.bin"), model);
    save_model(temp_path("b.bin"), load_model(temp_path("a.bin")));
    EXPECT_EQ(file_bytes(temp_path("a.bin")), file_bytes(temp_path("b.bin")));
}

TEST(Checkpoint, HeaderLayout) {
    TransformerLM model(tiny_config(), 7);
    const fs::path p = temp_path("layout.bin");
    save_model(p, model);
    const std::string bytes = file_bytes(p);
    EXPECT_EQ(bytes.substr(0, 8), "MPQMODEL");
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);  // version, little-endian
    EXPECT_EQ(bytes[9], 0);
    const auto magic = peek_magic(p);
    EXPECT_EQ(magic, container::kModelMagic);
}

TEST(Checkpoint, BadMagicIsRejected) {
    const fs::path p = temp_path("magic.bin");
    write_bytes(p, "NOTMAGIC\x01\x00\x00\x00");
    try {
        load_model(p);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    }
}

TEST(Checkpoint, TruncationNamesRecordAndField) {
    TransformerLM model(tiny_config(), 8);
    const fs::path p = temp_path("trunc.bin");
    save_model(p, model);
    std::string bytes = file_bytes(p);
    write_bytes(p, bytes.substr(0, bytes.size() - 3));
    try {
        load_model(p);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("record"), std::string::npos) << msg;
        EXPECT_NE(msg.find("out.proj"), std::string::npos) << msg;
        EXPECT_NE(msg.find("payload"), std::string::npos) << msg;
    }
}

TEST(Checkpoint, UnknownDtypeIsRejected) {
    container::Container c;
    c.magic = container::kModelMagic;
    c.tensors.push_back({"x", {2}, {1.0f, 2.0f}});
    std::stringstream ss;
    container::write(ss, c);
    std::string bytes = ss.str();
    // header(20) + kind(1) + name length(4) + "x"(1) -> dtype byte.
    bytes[26] = 7;
    std::stringstream in(bytes);
    try {
        container::read(in);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("dtype"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, MisshapedTensorIsRejected) {
    TransformerLM model(tiny_config(), 9);
    auto params = model.parameters();
    params[2].tensor = Tensor({3, 3});
    EXPECT_THROW(TransformerLM::from_parameters(model.config(), params), FormatError);
    params = model.parameters();
    params.pop_back();
    EXPECT_THROW(TransformerLM::from_parameters(model.config(), params), FormatError);
}

TEST(Checkpoint, MissingFileIsDataError) {
    EXPECT_THROW(load_model(temp_path("does_not_exist.bin")), DataError);
}

TEST(Checkpoint, IntegerAndClusterRecordsRoundTrip) {
    container::Container c;
    c.magic = container::kQuantMagic;
    c.integers.push_back({"meta.answer", -42});
    c.clusters.push_back({"layer0.attn", 2, 0.125, {{"layer0.Q", {2, 3}, {0x1B, 0x02}}}});
    std::stringstream ss;
    container::write(ss, c);
    const container::Container back = container::read(ss);
    EXPECT_EQ(back.integer("meta.answer"), -42);
    ASSERT_EQ(back.clusters.size(), 1u);
    EXPECT_EQ(back.clusters[0].id, "layer0.attn");
    EXPECT_EQ(back.clusters[0].n_bits, 2);
    EXPECT_EQ(back.clusters[0].alpha, 0.125);
    EXPECT_EQ(back.clusters[0].members[0].shape, (Shape{2, 3}));
    EXPECT_EQ(back.clusters[0].members[0].codes, (std::vector<std::uint8_t>{0x1B, 0x02}));
    EXPECT_THROW(back.integer("meta.missing"), FormatError);
}

}  // namespace
}  // namespace mpq
