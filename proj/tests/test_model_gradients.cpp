// Finite-difference checks of the model losses (double build), 20 seeds each.
#include "doctest.h"

#include "checks.h"

namespace {

void family(const std::string & name) {
    auto g = voxcheck::gradient_family(name, 20);
    MESSAGE(name << ": worst relative error " << g.worst_rel << ", " << g.kinks << " kink stencils skipped of "
                 << g.checked + g.kinks);
    CHECK(g.worst_rel < 1e-4);
    CHECK(g.checked > 0);
    CHECK(double(g.kinks) < 0.05 * double(g.checked + g.kinks));
}

}  // namespace

TEST_CASE("gradient: cosine distillation loss") { family("cosine_distillation"); }

TEST_CASE("gradient: feature matching, direct and through the discriminator") {
    family("feature_matching");
    family("feature_matching_discriminator");
}

TEST_CASE("gradient: composite codec objective") { family("codec_composite"); }

TEST_CASE("gradient: flow matching loss") { family("flow_matching"); }

TEST_CASE("gradient: semantic cross-entropy and the joint TTS loss") {
    family("semantic_ce");
    family("tts_joint");
}

TEST_CASE("gradient: semantic and flow DPO losses") {
    family("semantic_dpo");
    family("flow_dpo");
    family("pair_dpo");
}

TEST_CASE("gradient families: registry is complete") {
    CHECK(voxcheck::gradient_families().size() == 10);
    CHECK_THROWS(voxcheck::gradient_family("nope", 1));
}
