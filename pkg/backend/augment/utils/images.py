"""Image I/O and array <-> tensor conversion."""
import os
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from ..domain import ImageSample


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Read a raster image as an H×W×3 float32 array in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert('RGB')
        return np.asarray(rgb, dtype=np.float32) / 255.0


def write_image(pixels: np.ndarray, path: Union[str, Path]) -> None:
    """Write an H×W×C array in [0, 1] as an 8-bit PNG (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if data.shape[-1] == 1:
        data = data[..., 0]
    tmp = path.with_name(f'.{path.name}.tmp')
    Image.fromarray(data).save(tmp, format='PNG')
    os.replace(tmp, path)


def load_sample(sample: ImageSample, root: Union[str, Path, None] = None) -> ImageSample:
    """Return the sample with pixels attached, reading image_path if needed."""
    if sample.is_loaded:
        return sample
    if not sample.image_path:
        raise FileNotFoundError(f'{sample.image_id}: no pixels and no image_path')
    path = Path(sample.image_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return sample.with_pixels(read_image(path))


def to_tensor(pixels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H×W×C array -> 1×C×H×W tensor."""
    return torch.as_tensor(np.ascontiguousarray(pixels), dtype=dtype).permute(2, 0, 1).unsqueeze(0)


def to_pixels(tensor: torch.Tensor) -> np.ndarray:
    """1×C×H×W (or C×H×W) tensor -> H×W×C float32 array."""
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise ValueError(f'expected a single image, got batch of {tensor.shape[0]}')
        tensor = tensor[0]
    return tensor.detach().permute(1, 2, 0).to(torch.float32).cpu().numpy()


def sample_tensor(sample: ImageSample, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if not sample.is_loaded:
        raise ValueError(f'{sample.image_id}: pixels not loaded')
    return to_tensor(sample.pixels, dtype=dtype)


def resize_image(src: Union[str, Path], dst: Union[str, Path], size: tuple[int, int]) -> None:
    """Resize ``src`` to size = (width, height) with bicubic filtering and write a PNG to ``dst``."""
    with Image.open(src) as img:
        resized = img.convert('RGB').resize(size, Image.Resampling.BICUBIC)
    dst = Path(dst)
    dst.parent.mkdir(parents=True, exist_ok=True)
    tmp = dst.with_name(f'.{dst.name}.tmp')
    resized.save(tmp, format='PNG')
    os.replace(tmp, dst)
