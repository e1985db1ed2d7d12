"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.

Procedural multi-domain benchmark, the class-free style bank and the
manifests both are described by.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import os
import pathlib
from typing import Any, Callable, Iterator, Literal, NamedTuple, Sequence

import numpy as np
import torch
from lru import LRU
from PIL import Image, ImageDraw, ImageFilter, ImageOps

from ._types.artifacts import DatasetManifestPayload, StyleManifestPayload
from .errors import (
    ConfigError,
    EmptySequenceError,
    InconsistentHiddenStateError,
    ManifestError,
    MissingHiddenStatesError,
    MissingImageError,
)
from .model import ImageBatch
from .seeding import numpy_rng, stable_hash
from .tokenizer import split_words


__all__ = (
    'SHAPES',
    'DOMAINS',
    'CorpusConfig',
    'Sample',
    'DatasetManifest',
    'generate_corpus',
    'StyleBankConfig',
    'StyleRecord',
    'generate_style_bank',
    'save_style_manifest',
    'load_style_manifest',
    'style_vocabulary',
    'TaggedBatch',
    'two_stream_batches',
    'ImageStore',
)

log = logging.getLogger(__name__)

RGB = tuple[int, int, int]

_SUPERSAMPLE = 4


# Shapes


def _draw_polygon(
    draw: ImageDraw.ImageDraw, cx: float, cy: float, points: list[tuple[float, float]], angle: float, fill: RGB
) -> None:
    cos, sin = math.cos(angle), math.sin(angle)
    draw.polygon([(cx + x * cos - y * sin, cy + x * sin + y * cos) for x, y in points], fill=fill)


def _circle(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=fg)


def _ring(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=fg)
    inner = r * 0.6
    draw.ellipse((cx - inner, cy - inner, cx + inner, cy + inner), fill=bg)


def _crescent(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=fg)
    ox, oy = cx + math.cos(angle) * r * 0.45, cy + math.sin(angle) * r * 0.45
    draw.ellipse((ox - r * 0.85, oy - r * 0.85, ox + r * 0.85, oy + r * 0.85), fill=bg)


def _regular(sides: int) -> Callable[..., None]:
    def draw_shape(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
        draw.regular_polygon((cx, cy, r), sides, rotation=math.degrees(angle), fill=fg)

    return draw_shape


def _star(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    points = []
    for i in range(10):
        radius = r if i % 2 == 0 else r * 0.42
        theta = math.pi * i / 5 - math.pi / 2
        points.append((radius * math.cos(theta), radius * math.sin(theta)))
    _draw_polygon(draw, cx, cy, points, angle, fg)


def _diamond(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    _draw_polygon(draw, cx, cy, [(0, -r), (r * 0.55, 0), (0, r), (-r * 0.55, 0)], angle, fg)


def _cross(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    w = r * 0.3
    _draw_polygon(draw, cx, cy, [(-r, -w), (r, -w), (r, w), (-r, w)], angle, fg)
    _draw_polygon(draw, cx, cy, [(-w, -r), (w, -r), (w, r), (-w, r)], angle, fg)


def _arrow(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    w = r * 0.25
    points = [(-r, -w), (0, -w), (0, -r * 0.7), (r, 0), (0, r * 0.7), (0, w), (-r, w)]
    _draw_polygon(draw, cx, cy, points, angle, fg)


def _bar(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, angle: float, fg: RGB, bg: RGB) -> None:
    w = r * 0.22
    _draw_polygon(draw, cx, cy, [(-r, -w), (r, -w), (r, w), (-r, w)], angle, fg)


SHAPES: dict[str, Callable[..., None]] = {
    'circle': _circle,
    'square': _regular(4),
    'triangle': _regular(3),
    'star': _star,
    'cross': _cross,
    'ring': _ring,
    'diamond': _diamond,
    'arrow': _arrow,
    'hexagon': _regular(6),
    'crescent': _crescent,
    'pentagon': _regular(5),
    'bar': _bar,
}


def _colour(rng: np.random.Generator, low: int, high: int) -> RGB:
    r, g, b = (int(v) for v in rng.integers(low, high, size=3))
    return (r, g, b)


def render_shape(name: str, size: int, rng: np.random.Generator, jitter: float) -> Image.Image:
    canvas = size * _SUPERSAMPLE
    bg = _colour(rng, 170, 256)
    fg = _colour(rng, 0, 120)
    image = Image.new('RGB', (canvas, canvas), bg)
    draw = ImageDraw.Draw(image)
    cx = canvas / 2 + float(rng.uniform(-jitter, jitter)) * canvas
    cy = canvas / 2 + float(rng.uniform(-jitter, jitter)) * canvas
    radius = canvas * 0.3 * float(rng.uniform(1.0 - jitter, 1.0 + jitter))
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    SHAPES[name](draw, cx, cy, radius, angle, fg, bg)
    return image.resize((size, size), Image.Resampling.LANCZOS)


# Domains


@dataclasses.dataclass(frozen=True)
class CorpusConfig:
    n_classes: int = 10
    n_domains: int = 12
    images_per_cell: int = 20
    image_size: int = 32
    seed: int = 0
    name: str = 'benchmark'
    jitter: float = 0.12
    hue_shift: int = 85
    pixel_factor: int = 4
    stripe_period: int = 4
    noise_sigma: float = 40.0
    blur_radius: float = 1.5
    posterize_bits: int = 2
    checker_cell: int = 4
    solarize_threshold: int = 128

    def validate(self) -> None:
        counts = ('n_classes', 'n_domains', 'images_per_cell', 'image_size', 'pixel_factor', 'stripe_period', 'checker_cell')
        for field in counts:
            if getattr(self, field) < 1:
                raise ConfigError(f'{field} must be at least 1')
        if self.n_classes > len(SHAPES):
            raise ConfigError(f'At most {len(SHAPES)} classes are available')
        if self.n_domains > len(DOMAINS):
            raise ConfigError(f'At most {len(DOMAINS)} domains are available')

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


DomainTransform = Callable[[Image.Image, np.random.Generator, CorpusConfig], Image.Image]


def _clean(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    return image


def _hue(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    hsv = np.asarray(image.convert('HSV')).copy()
    hsv[..., 0] = (hsv[..., 0].astype(np.int32) + config.hue_shift) % 256
    return Image.frombytes('HSV', image.size, hsv.tobytes()).convert('RGB')


def _pixel(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    small = max(1, image.width // config.pixel_factor)
    return image.resize((small, small), Image.Resampling.BOX).resize(image.size, Image.Resampling.NEAREST)


def _stripes(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    pixels = np.asarray(image).astype(np.float32)
    rows = (np.arange(image.height) // max(1, config.stripe_period // 2)) % 2 == 0
    pixels[rows] *= 0.45
    return Image.fromarray(pixels.clip(0, 255).astype(np.uint8))


def _noise(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    pixels = np.asarray(image).astype(np.float32)
    pixels += rng.normal(0.0, config.noise_sigma, size=pixels.shape)
    return Image.fromarray(pixels.round().clip(0, 255).astype(np.uint8))


def _inverted(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    return ImageOps.invert(image)


def _blur(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    return image.filter(ImageFilter.GaussianBlur(radius=config.blur_radius))


def _poster(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    return ImageOps.posterize(image, config.posterize_bits)


def _outline(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    return image.filter(ImageFilter.CONTOUR)


def _gray(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    return ImageOps.grayscale(image).convert('RGB')


def _checker(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    pixels = np.asarray(image).astype(np.float32)
    cells = np.arange(image.height) // config.checker_cell
    board = (cells[:, None] + cells[None, :]) % 2 == 0
    pixels[board] = 255.0 - 0.6 * (255.0 - pixels[board])
    return Image.fromarray(pixels.clip(0, 255).astype(np.uint8))


def _solar(image: Image.Image, rng: np.random.Generator, config: CorpusConfig) -> Image.Image:
    return ImageOps.solarize(image, threshold=config.solarize_threshold)


DOMAINS: dict[str, DomainTransform] = {
    'clean': _clean,
    'hue': _hue,
    'pixel': _pixel,
    'stripes': _stripes,
    'noise': _noise,
    'inverted': _inverted,
    'blur': _blur,
    'poster': _poster,
    'outline': _outline,
    'gray': _gray,
    'checker': _checker,
    'solar': _solar,
}

CAPTION_TEMPLATE = 'a {domain} picture of a {name}'


# Manifests


class Sample(NamedTuple):
    path: pathlib.Path
    class_index: int
    domain_index: int


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    class_names: tuple[str, ...]
    domain_names: tuple[str, ...]
    samples: tuple[Sample, ...]

    def __post_init__(self) -> None:
        folded = [name.casefold() for name in self.class_names]
        if len(set(folded)) != len(folded):
            raise ManifestError(f'Class names of {self.name!r} are not unique after case-folding.')
        n_classes, n_domains = len(self.class_names), len(self.domain_names)
        for sample in self.samples:
            if not 0 <= sample.class_index < n_classes or not 0 <= sample.domain_index < n_domains:
                raise ManifestError(f'Sample {sample.path} has an index out of bounds in {self.name!r}.')

    def __len__(self) -> int:
        return len(self.samples)

    def __repr__(self) -> str:
        return (
            f'<DatasetManifest name={self.name!r} split={self.split!r} samples={len(self.samples)} '
            f'classes={len(self.class_names)} domains={len(self.domain_names)}>'
        )

    def caption(self, sample: Sample) -> str:
        domain, name = self.domain_names[sample.domain_index], self.class_names[sample.class_index]
        return CAPTION_TEMPLATE.format(domain=domain, name=name)

    def captions(self) -> list[str]:
        return [self.caption(s) for s in self.samples]

    def labels(self) -> torch.Tensor:
        return torch.tensor([s.class_index for s in self.samples], dtype=torch.long)

    def subset(
        self,
        *,
        domains: Sequence[str] | None = None,
        classes: Sequence[str] | None = None,
        name: str | None = None,
        split: str | None = None,
    ) -> DatasetManifest:
        """Restricts the manifest to some domains and classes.

        The kept names are re-indexed in the order they were given, so a
        class subset is also a new label space.
        """
        domain_names = tuple(domains) if domains is not None else self.domain_names
        class_names = tuple(classes) if classes is not None else self.class_names
        for wanted, known, kind in ((domain_names, self.domain_names, 'domain'), (class_names, self.class_names, 'class')):
            unknown = [n for n in wanted if n not in known]
            if unknown:
                raise ManifestError(f'Unknown {kind} names for {self.name!r}: {", ".join(unknown)}')

        domain_map = {self.domain_names.index(n): i for i, n in enumerate(domain_names)}
        class_map = {self.class_names.index(n): i for i, n in enumerate(class_names)}
        samples = tuple(
            Sample(s.path, class_map[s.class_index], domain_map[s.domain_index])
            for s in self.samples
            if s.class_index in class_map and s.domain_index in domain_map
        )
        return DatasetManifest(name or self.name, split or self.split, class_names, domain_names, samples)

    def to_payload(self, root: pathlib.Path) -> DatasetManifestPayload:
        return {
            'name': self.name,
            'split': self.split,
            'class_names': list(self.class_names),
            'domain_names': list(self.domain_names),
            'samples': [
                {
                    'path': pathlib.Path(os.path.relpath(s.path, root)).as_posix(),
                    'class_index': s.class_index,
                    'domain_index': s.domain_index,
                }
                for s in self.samples
            ],
        }

    def save(self, path: pathlib.Path) -> pathlib.Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.to_payload(path.parent)
        path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + '\n', encoding='utf-8', newline='\n')
        return path

    @classmethod
    def load(cls, path: pathlib.Path, *, check_files: bool = True) -> DatasetManifest:
        try:
            payload: DatasetManifestPayload = json.loads(path.read_text('utf-8'))
        except FileNotFoundError:
            raise ManifestError(f'Dataset manifest {path} does not exist.') from None
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ManifestError(f'Dataset manifest {path} is malformed: {e}') from None

        try:
            samples = tuple(
                Sample(path.parent / s['path'], int(s['class_index']), int(s['domain_index'])) for s in payload['samples']
            )
            manifest = cls(
                name=str(payload['name']),
                split=str(payload['split']),
                class_names=tuple(payload['class_names']),
                domain_names=tuple(payload['domain_names']),
                samples=samples,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f'Dataset manifest {path} is missing or mistypes a field: {e}') from None

        if check_files:
            for sample in manifest.samples:
                if not sample.path.is_file():
                    raise MissingImageError(f'Image {sample.path} listed in {path} does not exist.')
        return manifest


def _save_png(image: Image.Image, path: pathlib.Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format='PNG', optimize=False)


def generate_corpus(config: CorpusConfig, out_dir: pathlib.Path) -> DatasetManifest:
    """Renders every (class, domain) cell and writes ``manifest.json`` plus one manifest per domain."""
    config.validate()
    class_names = tuple(itertools.islice(SHAPES, config.n_classes))
    domain_names = tuple(itertools.islice(DOMAINS, config.n_domains))

    samples: list[Sample] = []
    for d, domain in enumerate(domain_names):
        transform = DOMAINS[domain]
        for c, shape in enumerate(class_names):
            for i in range(config.images_per_cell):
                rng = numpy_rng(config.seed, c, d, i)
                image = transform(render_shape(shape, config.image_size, rng, config.jitter), rng, config)
                path = out_dir / 'images' / domain / shape / f'{i:04d}.png'
                _save_png(image, path)
                samples.append(Sample(path, c, d))
        log.info('Rendered domain %s (%d/%d)', domain, d + 1, len(domain_names))

    manifest = DatasetManifest(config.name, 'all', class_names, domain_names, tuple(samples))
    manifest.save(out_dir / 'manifest.json')
    for domain in domain_names:
        manifest.subset(domains=[domain], name=domain, split=domain).save(out_dir / 'domains' / f'{domain}.json')
    return manifest


# Style bank

TEXTURES = ('waves', 'dots', 'grid', 'speckles', 'swirls', 'diagonals')
DENSITIES = {'sparse': 2.0, 'medium': 4.0, 'dense': 8.0}
PALETTE: dict[str, RGB] = {
    'red': (210, 40, 40),
    'orange': (240, 140, 30),
    'yellow': (240, 220, 50),
    'green': (50, 160, 60),
    'teal': (30, 150, 150),
    'blue': (40, 70, 200),
    'purple': (130, 50, 170),
    'pink': (240, 130, 190),
    'brown': (120, 75, 40),
    'black': (20, 20, 20),
    'white': (245, 245, 245),
    'gray': (128, 128, 128),
}
STYLE_TEMPLATE = '{density} {texture} in {first} and {second} tones'


def style_vocabulary() -> list[str]:
    words = set(split_words(STYLE_TEMPLATE.format(density='', texture='', first='', second='')))
    words.update(TEXTURES, DENSITIES, PALETTE)
    return sorted(words)


@dataclasses.dataclass(frozen=True)
class StyleBankConfig:
    n_styles: int = 64
    images_per_style: int = 8
    image_size: int = 32
    hidden_width: int = 32
    seed: int = 0

    def validate(self) -> None:
        for field in ('n_styles', 'images_per_style', 'image_size', 'hidden_width'):
            if getattr(self, field) < 1:
                raise ConfigError(f'{field} must be at least 1')
        combos = len(TEXTURES) * len(DENSITIES) * len(PALETTE) * (len(PALETTE) - 1)
        if self.n_styles > combos:
            raise ConfigError(f'At most {combos} distinct styles are available')

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class StyleRecord:
    """One synthetic domain: its caption, hidden-state vector and member images."""

    __slots__ = ('style_id', 'description', 'hidden_state', 'image_refs')

    def __init__(
        self,
        style_id: str,
        description: str,
        hidden_state: np.ndarray | None,
        image_refs: Sequence[pathlib.Path],
    ) -> None:
        self.style_id = style_id
        self.description = description
        self.hidden_state = hidden_state
        self.image_refs: tuple[pathlib.Path, ...] = tuple(image_refs)

    def __repr__(self) -> str:
        return f'<StyleRecord style_id={self.style_id!r} description={self.description!r} images={len(self.image_refs)}>'

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StyleRecord):
            return NotImplemented
        if (self.hidden_state is None) != (other.hidden_state is None):
            return False
        if self.hidden_state is not None and not np.array_equal(self.hidden_state, other.hidden_state):  # type: ignore
            return False
        return (self.style_id, self.description, self.image_refs) == (other.style_id, other.description, other.image_refs)

    __hash__ = None  # type: ignore


def pseudo_hidden_state(description: str, width: int, seed: int) -> np.ndarray:
    """A stand-in for a language model's hidden state: a bag of seeded word vectors."""
    words = split_words(description)
    total = np.zeros(width, dtype=np.float64)
    for word in words:
        total += numpy_rng(seed, stable_hash(word)).standard_normal(width)
    return (total / math.sqrt(max(1, len(words)))).astype(np.float32)


def _render_texture(
    texture: str, frequency: float, first: RGB, second: RGB, size: int, rng: np.random.Generator
) -> Image.Image:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0.0, 1.0, size=2)
    theta = rng.uniform(0.0, math.pi)
    freq = frequency * rng.uniform(0.85, 1.15)
    if texture == 'waves':
        mask = 0.5 + 0.5 * np.sin(2 * math.pi * (freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase[0]))
    elif texture == 'dots':
        fx = (xs * freq + phase[0]) % 1.0 - 0.5
        fy = (ys * freq + phase[1]) % 1.0 - 0.5
        mask = (fx**2 + fy**2 < 0.09).astype(np.float64)
    elif texture == 'grid':
        fx = np.abs((xs * freq + phase[0]) % 1.0 - 0.5)
        fy = np.abs((ys * freq + phase[1]) % 1.0 - 0.5)
        mask = ((fx > 0.38) | (fy > 0.38)).astype(np.float64)
    elif texture == 'speckles':
        mask = (rng.random((size, size)) < 0.05 * freq).astype(np.float64)
    elif texture == 'swirls':
        dx, dy = xs - phase[0], ys - phase[1]
        mask = 0.5 + 0.5 * np.sin(2 * math.pi * freq * np.hypot(dx, dy) + 3.0 * np.arctan2(dy, dx))
    elif texture == 'diagonals':
        mask = (((xs + ys) * freq + phase[0]) % 1.0 < 0.5).astype(np.float64)
    else:
        raise ValueError(f'Unknown texture {texture!r}')

    a, b = np.array(first, dtype=np.float64), np.array(second, dtype=np.float64)
    pixels = a * (1.0 - mask[..., None]) + b * mask[..., None]
    pixels *= rng.uniform(0.9, 1.1)
    return Image.fromarray(pixels.round().clip(0, 255).astype(np.uint8))


def _describe_styles(config: StyleBankConfig) -> list[tuple[str, str, str, str]]:
    colours = list(PALETTE)
    combos = [
        (density, texture, first, second)
        for density in DENSITIES
        for texture in TEXTURES
        for first in colours
        for second in colours
        if first != second
    ]
    picks = numpy_rng(config.seed, stable_hash('styles')).choice(len(combos), size=config.n_styles, replace=False)
    return [combos[int(i)] for i in picks]


def generate_style_bank(config: StyleBankConfig, out_dir: pathlib.Path) -> list[StyleRecord]:
    """Writes class-free textures, their captions and hidden states, and ``styles.json``."""
    config.validate()
    records: list[StyleRecord] = []
    for s, (density, texture, first, second) in enumerate(_describe_styles(config)):
        style_id = f'style-{s:03d}'
        description = STYLE_TEMPLATE.format(density=density, texture=texture, first=first, second=second)
        refs: list[pathlib.Path] = []
        for i in range(config.images_per_style):
            rng = numpy_rng(config.seed, stable_hash(style_id), i)
            image = _render_texture(texture, DENSITIES[density], PALETTE[first], PALETTE[second], config.image_size, rng)
            path = out_dir / 'images' / style_id / f'{i:02d}.png'
            _save_png(image, path)
            refs.append(path)

        hidden = pseudo_hidden_state(description, config.hidden_width, config.seed)
        hidden_path = out_dir / 'hidden' / f'{style_id}.f32'
        hidden_path.parent.mkdir(parents=True, exist_ok=True)
        hidden_path.write_bytes(hidden.astype('<f4').tobytes())
        records.append(StyleRecord(style_id, description, hidden, refs))

    save_style_manifest(records, out_dir / 'styles.json', config.hidden_width)
    log.info('Wrote %d styles with %d images each to %s', len(records), config.images_per_style, out_dir)
    return records


def save_style_manifest(records: Sequence[StyleRecord], path: pathlib.Path, hidden_width: int) -> pathlib.Path:
    """Writes the manifest only. Hidden-state files are expected next to it under ``hidden/``."""
    root = path.parent
    payload: StyleManifestPayload = {
        'hidden_state_width': hidden_width,
        'styles': [
            {
                'style_id': r.style_id,
                'description': r.description,
                'hidden_state_file': None if r.hidden_state is None else f'hidden/{r.style_id}.f32',
                'images': [pathlib.Path(os.path.relpath(p, root)).as_posix() for p in r.image_refs],
            }
            for r in records
        ],
    }
    root.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + '\n', encoding='utf-8', newline='\n')
    return path


def _read_hidden_state(path: pathlib.Path, width: int, style_id: str) -> np.ndarray:
    data = path.read_bytes()
    if len(data) != 4 * width:
        raise InconsistentHiddenStateError(
            f'Hidden state of {style_id!r} holds {len(data) // 4} values, the manifest declares {width}.'
        )
    vector = np.frombuffer(data, dtype='<f4').astype(np.float32)
    if not np.isfinite(vector).all():
        raise ManifestError(f'Hidden state of {style_id!r} is not finite.')
    return vector


def load_style_manifest(path: pathlib.Path, *, allow_missing_hidden: bool = False) -> list[StyleRecord]:
    """Reads and validates a style manifest.

    Styles without a readable hidden-state file are only accepted when
    ``allow_missing_hidden`` is set, which callers do when the hidden-state
    loss is ablated. Their ``hidden_state`` is then ``None``.
    """
    try:
        payload: StyleManifestPayload = json.loads(path.read_text('utf-8'))
    except FileNotFoundError:
        raise ManifestError(f'Style manifest {path} does not exist.') from None
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f'Style manifest {path} is malformed: {e}') from None

    if not isinstance(payload, dict):
        raise ManifestError(f'Style manifest {path} must be a JSON object.')
    width = payload.get('hidden_state_width')
    styles = payload.get('styles')
    if not isinstance(width, int) or isinstance(width, bool) or width < 1:
        raise ManifestError('hidden_state_width must be a positive integer.')
    if not isinstance(styles, list) or not styles:
        raise ManifestError('styles must be a non-empty list.')

    root = path.parent
    seen: set[str] = set()
    records: list[StyleRecord] = []
    for entry in styles:
        if not isinstance(entry, dict):
            raise ManifestError('Every style must be a JSON object.')
        style_id = entry.get('style_id')
        description = entry.get('description')
        images = entry.get('images')
        if not isinstance(style_id, str) or not style_id:
            raise ManifestError('style_id must be a non-empty string.')
        if style_id in seen:
            raise ManifestError(f'Duplicate style_id {style_id!r}.')
        seen.add(style_id)
        if not isinstance(description, str) or not description.strip():
            raise ManifestError(f'Style {style_id!r} has an empty description.')
        if not isinstance(images, list) or not images or not all(isinstance(p, str) for p in images):
            raise ManifestError(f'Style {style_id!r} must list at least one image path.')

        refs = [root / p for p in images]
        for ref in refs:
            if not ref.is_file():
                raise MissingImageError(f'Image {ref} of style {style_id!r} does not exist.')

        hidden_file = entry.get('hidden_state_file')
        hidden: np.ndarray | None = None
        if isinstance(hidden_file, str) and (root / hidden_file).is_file():
            hidden = _read_hidden_state(root / hidden_file, width, style_id)
        elif hidden_file is not None and not isinstance(hidden_file, str):
            raise ManifestError(f'hidden_state_file of {style_id!r} must be a string or null.')
        elif not allow_missing_hidden:
            raise MissingHiddenStatesError(
                f'Style {style_id!r} has no hidden-state file; disable the hidden-state loss to load it anyway.'
            )
        records.append(StyleRecord(style_id, description, hidden, refs))
    return records


# Two-stream batches


class TaggedBatch(NamedTuple):
    kind: Literal['source', 'diffusion']
    epoch: int
    samples: tuple[Sample, ...]
    styles: tuple[tuple[StyleRecord, pathlib.Path], ...]


def two_stream_batches(
    source: DatasetManifest,
    styles: Sequence[StyleRecord],
    batch_size: int,
    ratio: float,
    seed: int,
    *,
    style_batch_size: int | None = None,
    epochs: int | None = None,
) -> Iterator[TaggedBatch]:
    """Interleaves shuffled source batches with diffusion batches.

    A diffusion batch follows every ``ratio`` source batches, counted across
    epochs. ``ratio=math.inf`` yields the source stream alone. Each epoch
    visits every source sample exactly once; the last batch may be short.
    Diffusion batches draw distinct styles and one image from each.
    """
    if not source.samples:
        raise EmptySequenceError('The source manifest has no samples.')
    if batch_size < 1:
        raise ValueError('batch_size must be at least 1')
    diffusion = not math.isinf(ratio)
    if diffusion:
        if ratio < 1 or ratio != int(ratio):
            raise ValueError(f'ratio must be a positive integer or infinity, got {ratio}')
        if not styles:
            raise EmptySequenceError('A diffusion stream needs at least one style.')
    per_style_batch = min(style_batch_size or batch_size, len(styles)) if diffusion else 0

    style_rng = numpy_rng(seed, 1)
    count = 0
    epoch = 0
    while epochs is None or epoch < epochs:
        order = numpy_rng(seed, 0, epoch).permutation(len(source.samples))
        for start in range(0, len(order), batch_size):
            chunk = tuple(source.samples[int(i)] for i in order[start : start + batch_size])
            yield TaggedBatch('source', epoch, chunk, ())
            count += 1
            if diffusion and count % int(ratio) == 0:
                picks = style_rng.choice(len(styles), size=per_style_batch, replace=False)
                chosen = []
                for p in picks:
                    record = styles[int(p)]
                    chosen.append((record, record.image_refs[int(style_rng.integers(len(record.image_refs)))]))
                yield TaggedBatch('diffusion', epoch, (), tuple(chosen))
        epoch += 1


class ImageStore:
    """Loads images as ``[C, H, W]`` float tensors in [0, 1], resized to the model's input size."""

    def __init__(self, image_size: int, *, max_cached: int = 8192) -> None:
        self.image_size = image_size
        self.max_cached = max_cached
        self._cache: LRU = LRU(max_cached)

    def __repr__(self) -> str:
        return f'<ImageStore image_size={self.image_size} cached={len(self._cache)}>'

    def _read(self, path: pathlib.Path) -> torch.Tensor:
        try:
            with Image.open(path) as image:
                image = image.convert('RGB')
                if image.size != (self.image_size, self.image_size):
                    image = image.resize((self.image_size, self.image_size), Image.Resampling.BILINEAR)
                array = np.asarray(image, dtype=np.float32) / 255.0
        except FileNotFoundError:
            raise MissingImageError(f'Image {path} does not exist.') from None
        return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()

    def load(self, path: pathlib.Path) -> torch.Tensor:
        cached = self._cache.get(path)
        if cached is not None:
            return cached
        tensor = self._cache[path] = self._read(path)
        return tensor

    def stack(self, paths: Sequence[pathlib.Path]) -> ImageBatch:
        if not paths:
            raise EmptySequenceError('No images to load.')
        pixels = torch.stack([self.load(p) for p in paths])
        return ImageBatch(pixels, [p.as_posix() for p in paths])

    def samples(self, samples: Sequence[Sample]) -> tuple[ImageBatch, torch.Tensor]:
        batch = self.stack([s.path for s in samples])
        return batch, torch.tensor([s.class_index for s in samples], dtype=torch.long)
