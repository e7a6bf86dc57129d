from .render import DisparityRangeError, Layer, render_view, sample_shifted
from .scene import SceneConfig, SceneConfigError, StereoSample, generate_scene
from .storage import (
    FORMAT_VERSION,
    DatasetManifest,
    SampleFormatError,
    derive_seeds,
    generate_dataset,
    load_dataset,
    read_pgm,
    read_sample,
    write_pgm,
    write_sample,
)
from .texture import make_texture
