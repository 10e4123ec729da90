#include <catch2/catch_amalgamated.hpp>

#include "mmtf/templates.hpp"

using namespace mmtf;

namespace {
const TemplateLibrary& lib() {
    static TemplateLibrary l = TemplateLibrary::load();
    return l;
}

TaskSpec translate_spec(const std::string& src, const std::string& tgt) {
    return TaskSpec{Task::Translate, {{"source", src}, {"target", tgt}}};
}
}  // namespace

TEST_CASE("golden instruction renderings", "[templates]") {
    CHECK(lib().render_instruction(translate_spec("T1", "T2"), 1) ==
          "Convert the input brain MR image from T1 into a brain MR image in T2.");
    CHECK(lib().render_instruction(TaskSpec{Task::Segment, {{"roi", "whole tumor"}}}, 0) ==
          "Generate a segmentation map for whole tumor in a given brain MR image.");
    CHECK(lib().render_instruction(TaskSpec{Task::Report, {}}, 0) ==
          "Generate free-text radiology reports for the provided brain MR images.");
    CHECK(lib().render_instruction(
              TaskSpec{Task::Vqa, {{"question", "What type of scan is used for this image?"}}},
              3) == "What type of scan is used for this image?");
}

TEST_CASE("template lists have ten entries each and captions five", "[templates]") {
    CHECK(lib().task_templates(Task::Report).size() == 10);
    CHECK(lib().task_templates(Task::Translate).size() == 10);
    CHECK(lib().task_templates(Task::Segment).size() == 10);
    CHECK(lib().captions().size() == 5);
}

TEST_CASE("no unresolved slot survives any (template, spec) pair", "[templates]") {
    std::vector<TaskSpec> grid;
    grid.push_back(TaskSpec{Task::Report, {}});
    grid.push_back(TaskSpec{Task::Vqa, {{"question", "What abnormality do you see?"}}});
    for (const auto& src : modality_names())
        for (const auto& tgt : modality_names())
            if (src != tgt) grid.push_back(translate_spec(src, tgt));
    for (const auto& roi : roi_names()) grid.push_back(TaskSpec{Task::Segment, {{"roi", roi}}});

    for (const auto& spec : grid)
        for (int idx = 0; idx < 10; ++idx) {
            std::string s = lib().render_instruction(spec, idx);
            CHECK(s.find('{') == std::string::npos);
            CHECK(s.find('}') == std::string::npos);
            CHECK_FALSE(s.empty());
        }
}

TEST_CASE("caption rendering fills all three slots", "[templates]") {
    CHECK(lib().make_caption("T1", "axial", "glioma", 0) ==
          "Captured using a T1 scan, this image shows a axial section of the brain and "
          "demonstrates a glioma.");
    for (int idx = 0; idx < 5; ++idx) {
        std::string s = lib().make_caption("T2", "coronal", "stroke", idx);
        CHECK(s.find('{') == std::string::npos);
        CHECK(s.find("T2") != std::string::npos);
        CHECK(s.find("coronal") != std::string::npos);
        CHECK(s.find("stroke") != std::string::npos);
    }
    CHECK_THROWS_AS(lib().make_caption("T1", "axial", "glioma", 5), InvalidInput);
}

TEST_CASE("spec validation rejects malformed requests", "[templates]") {
    CHECK_THROWS_AS(lib().render_instruction(translate_spec("T1", "T1"), 0), InvalidInput);
    CHECK_THROWS_AS(lib().render_instruction(TaskSpec{Task::Segment, {{"roi", "spleen"}}}, 0),
                    InvalidInput);
    CHECK_THROWS_AS(lib().render_instruction(TaskSpec{Task::Segment, {}}, 0), InvalidInput);
    CHECK_THROWS_AS(lib().render_instruction(TaskSpec{Task::Vqa, {}}, 0), InvalidInput);
    CHECK_THROWS_AS(lib().render_instruction(translate_spec("T1", "T2"), 10), InvalidInput);
    CHECK_THROWS_AS(lib().render_instruction(translate_spec("T1", "T2"), -1), InvalidInput);
}

TEST_CASE("missing slot errors carry the slot name", "[templates]") {
    try {
        fill_slots("an {orphan} slot", {});
        FAIL("expected throw");
    } catch (const InvalidInput& e) {
        CHECK(std::string(e.what()).find("orphan") != std::string::npos);
    }
    CHECK_THROWS_AS(fill_slots("dangling {brace", {}), InvalidInput);
    CHECK(fill_slots("no slots at all", {}) == "no slots at all");
}

TEST_CASE("task names parse and print consistently", "[templates]") {
    for (Task t : {Task::Report, Task::Vqa, Task::Translate, Task::Segment})
        CHECK(parse_task(to_string(t)) == t);
    CHECK_THROWS_AS(parse_task("captioning"), InvalidInput);
}
