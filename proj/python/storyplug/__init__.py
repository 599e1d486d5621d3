"""Character plugins, embedding fusion and layout-steered frame generation."""

import json as _json

from ._storyplug import (
    Plugin,
    StoryplugError,
    create_toy_plugin,
    extract_plugin,
    generate_frame,
    image_alignment,
    load_plugin,
    plugin_from_bytes,
    rasterize_layout,
    request_hash,
    text_alignment,
    token_matrix,
)
from ._storyplug import render_story as _render_story


def render_story(script, plugin_dir, out_dir):
    """Render a story script (path, JSON text or dict); returns the manifest dict."""
    if isinstance(script, dict):
        script = _json.dumps(script)
    return _json.loads(_render_story(str(script), str(plugin_dir), str(out_dir)))


__all__ = [
    "Plugin",
    "StoryplugError",
    "create_toy_plugin",
    "extract_plugin",
    "generate_frame",
    "image_alignment",
    "load_plugin",
    "plugin_from_bytes",
    "rasterize_layout",
    "render_story",
    "request_hash",
    "text_alignment",
    "token_matrix",
]
