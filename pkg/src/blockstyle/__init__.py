"""Block-restricted image-feature injection and content subtraction on a toy
latent diffusion model, with DDIM sampling/inversion and experiment sweeps."""

from .attention import (
    BLOCKS,
    AttnWeights,
    BlockId,
    InjectionConfig,
    attention,
    decoupled_cross_attention,
    make_preset,
)
from .diffusion import DiffusionTrajectory, NoiseSchedule, ddim_invert, ddim_invert_step, ddim_sample, ddim_step
from .embedding import (
    SubtractionConfig,
    ToyJointSpace,
    cosine,
    encode_image_toy,
    encode_text_toy,
    joint_query,
    subtract_content,
)
from .errors import BlockStyleError, ConfigError, DegenerateError, ImageIOError, InputError, NumericError, ShapeError
from .imageio import Image, read_ppm, write_ppm
from .kernel import SeededRng, matmul, rng_normal, softmax_rows
from .pipeline import RunConfig, SweepReport, invert_report, stylize, sweep_blocks, sweep_strength, sweep_subtraction
from .unet import Trace, UNetTopology, make_planted_net, make_toy_net, unet_forward

__version__ = "0.1.0"
