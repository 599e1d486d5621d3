// Thin Python surface over the toy backend: plugins, token matrices, frames, stories, metrics.

#include "storyplug/evaluation.hpp"
#include "storyplug/extraction.hpp"
#include "storyplug/finetune.hpp"
#include "storyplug/inference.hpp"
#include "storyplug/plugin.hpp"
#include "storyplug/story.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <array>
#include <cstring>

namespace py = pybind11;
using namespace storyplug;

namespace {

const ToyBackend& toy() {
    static const ToyBackend backend;
    return backend;
}

BackendDescriptor descriptor_named(const std::string& id) {
    if (id == "toy" || id == toy_descriptor().backend_id) return toy_descriptor();
    if (id == "sd21" || id == sd21_descriptor().backend_id) return sd21_descriptor();
    throw py::value_error("unknown descriptor '" + id + "' (toy or sd21)");
}

using Boxes = std::map<std::string, std::array<double, 4>>;

LayoutSpec layout_of(const Boxes& boxes) {
    nlohmann::json j = {{"boxes", nlohmann::json::object()}};
    for (const auto& [name, b] : boxes) j["boxes"][name] = b;
    return layout_from_json(j);
}

EditSchedule schedule_of(const std::string& kind, double fraction, double base_scale) {
    return schedule_from_json({{"kind", kind}, {"active_fraction", fraction}, {"base_scale", base_scale}});
}

py::array_t<std::uint8_t> image_array(const Image& img) {
    py::array_t<std::uint8_t> out({img.height, img.width, img.channels});
    std::memcpy(out.mutable_data(), img.pixels.data(), img.pixels.size());
    return out;
}

Image image_of(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 3) throw py::value_error("images are H x W x C uint8 arrays");
    Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), static_cast<int>(a.shape(2)));
    std::memcpy(img.pixels.data(), a.data(), img.pixels.size());
    return img;
}

GenerationRequest request_of(const std::string& prompt, const std::vector<CharacterPlugin>& plugins, const Boxes& layout,
                             std::uint64_t seed, int steps, double guidance, const std::string& kind, double fraction,
                             double base_scale) {
    GenerationRequest r;
    r.prompt = prompt;
    r.plugins = plugins;
    r.layout = layout_of(layout);
    r.schedule = schedule_of(kind, fraction, base_scale);
    r.seed = seed;
    r.steps = steps;
    r.guidance_scale = guidance;
    return r;
}

}  // namespace

PYBIND11_MODULE(_storyplug, m) {
    m.doc() = "storyplug core bindings (toy backend)";

    static py::exception<Error> error(m, "StoryplugError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object exc = error;
            py::object inst = exc(std::string(error_code_name(e.code())) + ": " + e.what());
            inst.attr("code") = std::string(error_code_name(e.code()));
            PyErr_SetObject(error.ptr(), inst.ptr());
        }
    });

    py::class_<CharacterPlugin>(m, "Plugin")
        .def_readonly("name", &CharacterPlugin::name)
        .def_readonly("class_noun", &CharacterPlugin::class_noun)
        .def_readonly("descriptor_id", &CharacterPlugin::descriptor_id)
        .def_readonly("created_at", &CharacterPlugin::created_at)
        .def_readonly("format_version", &CharacterPlugin::format_version)
        .def_property_readonly("rows", [](const CharacterPlugin& p) { return PluginMatrix(p.rows); })
        .def("digest", &plugin_content_digest)
        .def("to_bytes",
             [](const CharacterPlugin& p) {
                 const auto b = serialize(p);
                 return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
             })
        .def("save", [](const CharacterPlugin& p, const std::filesystem::path& path) { save_plugin(p, path); })
        .def("validate", [](const CharacterPlugin& p) { return validate(p, descriptor_named(p.descriptor_id)); })
        .def("__eq__", &bitwise_equal)
        .def("__repr__", [](const CharacterPlugin& p) {
            return "<Plugin " + p.name + " (" + p.class_noun + ") " + std::to_string(p.rows.rows()) + "x" +
                   std::to_string(p.rows.cols()) + ">";
        });

    m.def("load_plugin", &load_plugin, py::arg("path"));
    m.def(
        "plugin_from_bytes",
        [](const py::bytes& data) {
            const std::string s = data;
            return deserialize(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
        },
        py::arg("data"));

    m.def(
        "create_toy_plugin",
        [](const std::string& class_noun, const std::string& name, std::uint64_t encoder_seed) {
            return create_plugin(toy(), toy().random_encoder(encoder_seed), class_noun, name);
        },
        py::arg("class_noun"), py::arg("name"), py::arg("encoder_seed"),
        "Plugin distilled from a randomly initialised toy encoder; useful for wiring tests.");

    m.def(
        "extract_plugin",
        [](const std::filesystem::path& checkpoint, const std::string& name) {
            const auto ck = load_checkpoint(checkpoint);
            return create_plugin(toy(), checkpoint_encoder(ck, toy().descriptor()), ck.class_noun, name);
        },
        py::arg("checkpoint"), py::arg("name"));

    m.def(
        "token_matrix",
        [](const std::string& class_noun, const std::string& descriptor, int length) {
            auto d = descriptor_named(descriptor);
            if (length > 0) d.L = length;
            const auto tm = build_token_matrix(d, class_noun);
            py::array_t<int> out({tm.rows, tm.cols});
            std::memcpy(out.mutable_data(), tm.ids.data(), tm.ids.size() * sizeof(int));
            return out;
        },
        py::arg("class_noun"), py::arg("descriptor") = "toy", py::arg("length") = 0);

    m.def(
        "rasterize_layout",
        [](const Boxes& layout, const std::string& character, int side) {
            return rasterize_layout(layout_of(layout), character, side);
        },
        py::arg("layout"), py::arg("character"), py::arg("side"));

    m.def(
        "generate_frame",
        [](const std::string& prompt, const std::vector<CharacterPlugin>& plugins, const Boxes& layout,
           std::uint64_t seed, int steps, double guidance, const std::string& kind, double fraction, double base_scale) {
            const auto r = request_of(prompt, plugins, layout, seed, steps, guidance, kind, fraction, base_scale);
            FrameResult f;
            {
                py::gil_scoped_release release;
                f = generate_frame(r, toy());
            }
            py::dict out;
            out["image"] = image_array(f.image);
            out["request_hash"] = request_hash(r, toy().descriptor());
            out["diagnostics"] = f.diagnostics.to_json().dump();
            return out;
        },
        py::arg("prompt"), py::arg("plugins") = std::vector<CharacterPlugin>{}, py::arg("layout") = Boxes{},
        py::kw_only(), py::arg("seed"), py::arg("steps") = 100, py::arg("guidance_scale") = 7.5,
        py::arg("schedule") = "linear_decay", py::arg("active_fraction") = 0.5, py::arg("base_scale") = 1.0);

    m.def(
        "request_hash",
        [](const std::string& prompt, const std::vector<CharacterPlugin>& plugins, const Boxes& layout,
           std::uint64_t seed, int steps, double guidance, const std::string& kind, double fraction, double base_scale) {
            return request_hash(request_of(prompt, plugins, layout, seed, steps, guidance, kind, fraction, base_scale),
                                toy().descriptor());
        },
        py::arg("prompt"), py::arg("plugins") = std::vector<CharacterPlugin>{}, py::arg("layout") = Boxes{},
        py::kw_only(), py::arg("seed"), py::arg("steps") = 100, py::arg("guidance_scale") = 7.5,
        py::arg("schedule") = "linear_decay", py::arg("active_fraction") = 0.5, py::arg("base_scale") = 1.0);

    // Script is a path or JSON text; returns the manifest as JSON text.
    m.def(
        "render_story",
        [](const std::string& script, const std::filesystem::path& plugin_dir, const std::filesystem::path& out_dir) {
            const auto s = !script.empty() && script.front() == '{' ? parse_script(script) : load_script(script);
            const auto store = PluginStore::load_dir(plugin_dir);
            py::gil_scoped_release release;
            return render_story(s, store, toy(), out_dir).manifest.dump();
        },
        py::arg("script"), py::arg("plugin_dir"), py::arg("out_dir"));

    m.def(
        "text_alignment",
        [](const std::vector<py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>>& images,
           const std::string& prompt) {
            std::vector<Image> imgs;
            for (const auto& a : images) imgs.push_back(image_of(a));
            return text_alignment(imgs, prompt, HashEmbedder{});
        },
        py::arg("images"), py::arg("prompt"), "Mean cosine between frame and prompt embeddings (hash embedder).");

    m.def(
        "image_alignment",
        [](const std::vector<py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>>& images,
           const std::vector<std::vector<py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>>>& refs) {
            std::vector<Image> imgs;
            for (const auto& a : images) imgs.push_back(image_of(a));
            std::vector<std::vector<Image>> rs;
            for (const auto& group : refs) {
                rs.emplace_back();
                for (const auto& a : group) rs.back().push_back(image_of(a));
            }
            return image_alignment(imgs, rs, HashEmbedder{});
        },
        py::arg("images"), py::arg("references"));
}
