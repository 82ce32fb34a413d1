"""Single-image FID (SIFID) and perceptual distance over deep features.

Feature extractors are pluggable. ``RandomConvExtractor`` is a seeded,
weight-free stand-in that makes every metric computable offline;
``VGGFileExtractor`` loads VGG19 convolutional weights from a local file.
Scores are only comparable between runs that used the same extractor
descriptor.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateStatisticsError, ManifestError, ShapeError
from .imaging import check_image, load_image


class FeatureExtractor:
    """Maps an image to named feature maps of shape ``(1, C, H, W)``.

    Subclasses implement :meth:`taps` and name the layer used for SIFID and
    the layers averaged by the perceptual distance.
    """

    descriptor: str = "abstract"
    sifid_layer: str = ""
    pd_layers: tuple[str, ...] = ()

    def taps(self, img: torch.Tensor) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def __call__(self, img: torch.Tensor) -> dict[str, torch.Tensor]:
        check_image(img)
        with torch.no_grad():
            return self.taps(img)


class RandomConvExtractor(FeatureExtractor):
    """Deterministic random convolutional features (three conv stages, ReLU, average pooling)."""

    def __init__(self, seed: int = 0, widths: tuple[int, int, int] = (32, 64, 64)):
        gen = torch.Generator().manual_seed(seed)
        chans = (3,) + tuple(widths)
        self.convs = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * cin)) ** 0.5, generator=gen)
                conv.bias.zero_()
            self.convs.append(conv.eval())
        self.descriptor = f"random-conv(seed={seed},widths={'-'.join(map(str, widths))})"
        self.sifid_layer = "pool1"
        self.pd_layers = ("relu1", "relu2", "relu3")

    def taps(self, img):
        out = {}
        x = F.relu(self.convs[0](img))
        out["relu1"] = x
        x = F.avg_pool2d(x, 2)
        out["pool1"] = x
        x = F.relu(self.convs[1](x))
        out["relu2"] = x
        x = F.relu(self.convs[2](F.avg_pool2d(x, 2)))
        out["relu3"] = x
        return out


class LinearExtractor(FeatureExtractor):
    """A single random bias-free convolution; features are linear in the image."""

    def __init__(self, seed: int = 0, width: int = 16):
        gen = torch.Generator().manual_seed(seed)
        self.weight = torch.randn(width, 3, 3, 3, generator=gen) / 9.0
        self.descriptor = f"linear-conv(seed={seed},width={width})"
        self.sifid_layer = "conv"
        self.pd_layers = ("conv",)

    def taps(self, img):
        return {"conv": F.conv2d(img, self.weight.to(img.dtype), padding=1)}


# indices into torchvision's vgg19().features
VGG19_TAPS = {"relu1_2": 3, "pool1": 4, "relu2_2": 8, "relu3_4": 17, "relu4_4": 26}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class VGGFileExtractor(FeatureExtractor):
    """VGG19 features with weights read from a local ``state_dict`` file.

    The file may hold a full torchvision ``vgg19`` state dict or only its
    ``features.*`` entries; layers beyond ``relu4_4`` are not needed.
    SIFID uses ``pool1``; PD averages relu1_2, relu2_2, relu3_4 and relu4_4.
    """

    sifid_layer = "pool1"
    pd_layers = ("relu1_2", "relu2_2", "relu3_4", "relu4_4")

    def __init__(self, path: str | os.PathLike):
        from torchvision.models import vgg19

        depth = max(VGG19_TAPS.values()) + 1
        self.features = vgg19(weights=None).features[:depth].eval()
        state = torch.load(path, map_location="cpu", weights_only=True)
        wanted = {}
        for key, tensor in state.items():
            name = key[len("features."):] if key.startswith("features.") else key
            idx = int(name.split(".")[0]) if name.split(".")[0].isdigit() else None
            if idx is not None and idx < depth:
                wanted[name] = tensor
        missing = set(self.features.state_dict()) - set(wanted)
        if missing:
            raise ValueError(f"{path}: weights file lacks VGG19 layers {sorted(missing)}")
        self.features.load_state_dict(wanted)
        self.descriptor = f"vgg19-file({Path(path).name})"
        self.mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self.std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)

    def taps(self, img):
        x = ((img + 1.0) / 2.0 - self.mean) / self.std
        out = {}
        by_index = {v: k for k, v in VGG19_TAPS.items()}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in by_index:
                out[by_index[i]] = x
        return out


def make_extractor(spec: str) -> FeatureExtractor:
    """``synthetic`` | ``synthetic:<seed>`` | ``linear`` | ``file:<path>``."""
    if spec == "synthetic":
        return RandomConvExtractor()
    if spec.startswith("synthetic:"):
        return RandomConvExtractor(seed=int(spec.split(":", 1)[1]))
    if spec == "linear":
        return LinearExtractor()
    if spec.startswith("file:"):
        return VGGFileExtractor(spec[len("file:"):])
    raise ValueError(f"unknown extractor {spec!r}; expected synthetic, linear or file:<path>")


def _samples(features: torch.Tensor) -> np.ndarray:
    c = features.shape[1]
    return features.detach().to(torch.float64).reshape(c, -1).T.cpu().numpy()


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of (S1 S2)^(1/2) is computed as Tr((S1^(1/2) S2 S1^(1/2))^(1/2)),
    which has the same eigenvalues but stays symmetric.
    """
    root1 = _psd_sqrt(cov1)
    inner = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_covmean = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_covmean)


def feature_statistics(features: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    samples = _samples(features)
    if samples.shape[0] < 2:
        raise DegenerateStatisticsError(
            f"need at least 2 spatial feature samples, got {samples.shape[0]}"
        )
    return samples.mean(axis=0), np.atleast_2d(np.cov(samples, rowvar=False))


def sifid(x: torch.Tensor, y: torch.Tensor, f: FeatureExtractor) -> float:
    mu1, cov1 = feature_statistics(f(x)[f.sifid_layer])
    mu2, cov2 = feature_statistics(f(y)[f.sifid_layer])
    return frechet_distance(mu1, cov1, mu2, cov2)


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, f: FeatureExtractor) -> float:
    """Mean over layers of the mean squared feature difference."""
    if x.shape != y.shape:
        raise ShapeError(f"perceptual distance needs equal shapes, got {tuple(x.shape)} and {tuple(y.shape)}")
    fx, fy = f(x), f(y)
    per_layer = [
        (fx[name].to(torch.float64) - fy[name].to(torch.float64)).pow(2).mean().item() for name in f.pd_layers
    ]
    return float(np.mean(per_layer))


@dataclass
class MetricReport:
    source: str
    target: str
    translated: str
    sifid: float
    pd: float
    extractor: str


def read_pairs_manifest(path: str | os.PathLike, root: str | os.PathLike | None = None) -> list[tuple[Path, Path, Path]]:
    """Parse ``source target translated`` lines; relative paths resolve against ``root``."""
    base = Path(root) if root is not None else Path(path).parent
    triples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 3:
            raise ManifestError(
                f"{path}: line {lineno}: expected 3 paths (source target translated), got {len(parts)}",
                offenders=[lineno],
            )
        triples.append(tuple(p if Path(p).is_absolute() else base / p for p in map(Path, parts)))
    if not triples:
        raise ManifestError(f"{path}: manifest lists no image pairs")
    missing = sorted({str(p) for t in triples for p in t if not p.is_file()})
    if missing:
        raise ManifestError(f"{path}: missing files: {', '.join(missing)}", offenders=missing)
    return triples


def aggregate(reports: list[MetricReport]) -> dict[str, float]:
    return {
        "pairs": len(reports),
        "sifid": float(np.mean([r.sifid for r in reports])),
        "pd": float(np.mean([r.pd for r in reports])),
    }


def format_report(reports: list[MetricReport], agg: dict[str, float]) -> str:
    lines = [f"extractor: {reports[0].extractor}"]
    for i, r in enumerate(reports, start=1):
        lines += [
            f"pair {i}:",
            f"  source: {r.source}",
            f"  target: {r.target}",
            f"  translated: {r.translated}",
            f"  sifid: {r.sifid:.10g}",
            f"  pd: {r.pd:.10g}",
        ]
    lines += ["aggregate:", f"  pairs: {agg['pairs']}", f"  sifid: {agg['sifid']:.10g}", f"  pd: {agg['pd']:.10g}"]
    return "\n".join(lines) + "\n"


def evaluate_run(
    model_output_dir: str | os.PathLike,
    pairs_manifest: str | os.PathLike,
    extractor: FeatureExtractor | None = None,
    report_path: str | os.PathLike | None = None,
) -> tuple[list[MetricReport], dict[str, float]]:
    """SIFID(translated, target) and PD(translated, source) for every manifest line.

    Relative manifest paths are resolved against ``model_output_dir``.
    """
    f = extractor or RandomConvExtractor()
    triples = read_pairs_manifest(pairs_manifest, root=model_output_dir)
    reports = []
    for source, target, translated in triples:
        src, tgt, out = load_image(source), load_image(target), load_image(translated)
        reports.append(
            MetricReport(
                source=str(source), target=str(target), translated=str(translated),
                sifid=sifid(out, tgt, f), pd=perceptual_distance(out, src, f), extractor=f.descriptor,
            )
        )
    agg = aggregate(reports)
    if report_path is not None:
        Path(report_path).write_text(format_report(reports, agg))
    return reports, agg
