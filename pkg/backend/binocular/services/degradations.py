"""
Test-time image degradations of the robustness suite.

Each degradation is a pure function of (image, parameters, seed): parameters
that are ranges (blur sigma, brightness factor) are drawn per image from a
numpy Generator seeded with the given seed. Outputs are clamped to [0, 1].
"""

import logging
import math

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from torchvision.transforms import InterpolationMode

from ..domain import Degradation
from ..exceptions import DegradationError

logger = logging.getLogger(__name__)

PRESETS: dict[str, Degradation] = {
    "resize": Degradation("resize", {"size": 224}),
    "blur": Degradation("gaussian_blur", {"sigma": [0.1, 2.0]}),
    "pepper": Degradation("pepper_noise", {"ratio": 0.01}),
    "jitter": Degradation("color_jitter", {"brightness": 0.8}),
}


def preset(name: str) -> Degradation:
    try:
        return PRESETS[name]
    except KeyError as e:
        raise DegradationError(
            f"Unknown degradation preset {name!r}; choose from {', '.join(PRESETS)}"
        ) from e


def _kernel_size(sigma: float, max_radius: int) -> int:
    radius = max(1, min(int(math.ceil(3.0 * sigma)), max_radius))
    return 2 * radius + 1


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Gaussian blur of a [C, H, W] image, kernel radius ceil(3 sigma), reflect padding."""
    if sigma <= 0.0:
        return image.clone()
    size = _kernel_size(sigma, min(image.shape[-2:]) - 1)
    return TF.gaussian_blur(image, kernel_size=[size, size], sigma=[sigma, sigma])


def pepper_noise(image: torch.Tensor, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    """Set round(ratio * H * W) pixel locations (all channels) to 0 or 1, equally likely."""
    channels, height, width = image.shape
    count = int(round(ratio * height * width))
    out = image.clone().reshape(channels, height * width)
    if count:
        where = torch.from_numpy(rng.choice(height * width, size=count, replace=False))
        values = torch.from_numpy(rng.integers(0, 2, size=count)).to(image.dtype)
        out[:, where] = values.unsqueeze(0).expand(channels, -1)
    return out.reshape(channels, height, width)


def apply_degradation(image: torch.Tensor, d: Degradation, rng_seed: int) -> torch.Tensor:
    """Degrade one [3, H, W] image with pixel values in [0, 1]."""
    if image.dim() != 3:
        raise DegradationError(f"Expected a [C, H, W] image, got shape {tuple(image.shape)}")
    if image.numel() and (float(image.min()) < 0.0 or float(image.max()) > 1.0):
        raise DegradationError("Image pixels must lie in [0, 1]")

    rng = np.random.default_rng(rng_seed)
    if d.kind == "resize":
        size = int(d.params["size"])
        out = TF.resize(image, [size, size], interpolation=InterpolationMode.BILINEAR)
    elif d.kind == "gaussian_blur":
        low, high = d.sigma_range
        sigma = float(rng.uniform(low, high)) if high > low else low
        out = gaussian_blur(image, sigma)
    elif d.kind == "pepper_noise":
        out = pepper_noise(image, float(d.params["ratio"]), rng)
    elif d.kind == "color_jitter":
        brightness = float(d.params["brightness"])
        factor = float(rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)) if brightness else 1.0
        out = TF.adjust_brightness(image, factor)
    else:  # Degradation validates kinds on construction
        raise DegradationError(f"Unsupported degradation {d.kind}")
    return out.clamp(0.0, 1.0)
