#include <random>

#include <gtest/gtest.h>

#include "floc/image.hpp"
#include "support.hpp"

using namespace floc;

TEST(Image, LuminanceWeights) {
    const Tensor px({1, 1, 3}, std::vector<double>{1.0, 0.5, 0.25});
    EXPECT_DOUBLE_EQ(luminance(px)[0], 0.299 + 0.587 * 0.5 + 0.114 * 0.25);
    EXPECT_THROW(luminance(Tensor({2, 2, 4})), ShapeError);
}

TEST(Image, CropCopiesTheWindow) {
    std::mt19937_64 rng(14);
    const Tensor img = floc::testing::random_image(6, 7, rng);
    const Tensor c = crop(img, 2, 3, 3, 4);
    ASSERT_EQ(c.shape(), (Shape{3, 4, 3}));
    for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(c.at(y, x, ch), img.at(y + 2, x + 3, ch));
    EXPECT_THROW(crop(img, 4, 0, 3, 1), ArgumentError);
}

TEST(Image, PngRoundTripIsExactForEightBitValues) {
    floc::testing::TempDir dir("png");
    std::mt19937_64 rng(15);
    const Tensor img = floc::testing::random_image(9, 13, rng);
    write_png(dir / "a.png", img);
    EXPECT_EQ(read_png(dir / "a.png"), img);

    Tensor mask({5, 4});
    mask.at(1, 2) = 1.0;
    write_png(dir / "m.png", mask);
    const Tensor back = read_png(dir / "m.png");
    ASSERT_EQ(back.shape(), (Shape{5, 4, 1}));
    EXPECT_EQ(to_mask(back), mask);
}

TEST(Image, ResizeKeepsConstantsAndMasksBinary) {
    const Tensor flat({4, 4, 3}, 0.3);
    const Tensor up = resize_bilinear(flat, 7, 9);
    for (double v : up.values()) EXPECT_NEAR(v, 0.3, 1e-15);
    EXPECT_EQ(resize_bilinear(flat, 4, 4), flat);

    Tensor mask({8, 8});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 8; ++x) mask.at(y, x) = 1.0;
    const Tensor half = resize_mask(mask, 4, 4);
    EXPECT_TRUE(is_binary_mask(half));
    EXPECT_EQ(half.at(0, 0), 1.0);
    EXPECT_EQ(half.at(3, 3), 0.0);
}

TEST(Image, ToRgbReplicatesGray) {
    const Tensor g({1, 2, 1}, std::vector<double>{0.2, 0.8});
    EXPECT_EQ(to_rgb(g), Tensor({1, 2, 3}, std::vector<double>{0.2, 0.2, 0.2, 0.8, 0.8, 0.8}));
}
