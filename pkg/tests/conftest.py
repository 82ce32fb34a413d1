import pytest
import torch

from tuigan.imaging import save_image


def blob_pair(size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Two unpaired toy images: an orange-ish blob and a greenish textured blob."""
    y, x = torch.meshgrid(torch.linspace(-1, 1, size), torch.linspace(-1, 1, size), indexing="ij")
    blob = torch.exp(-((x - 0.1) ** 2 + (y + 0.1) ** 2) * 3)
    a = torch.stack([blob * 1.6 - 0.6, blob * 0.9 - 0.5, -0.7 + 0.2 * y])
    b = torch.stack([blob * 1.2 - 0.7, blob * 1.5 - 0.6, -0.5 + 0.2 * x])
    b = b + 0.15 * torch.sin(6 * x) * torch.sin(6 * y)
    return a.clamp(-1, 1).unsqueeze(0), b.clamp(-1, 1).unsqueeze(0)


def random_image(h: int, w: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(1, 3, h, w, generator=gen, dtype=dtype) * 2 - 1)


@pytest.fixture
def images():
    return blob_pair()


@pytest.fixture
def image_files(tmp_path, images):
    a, b = images
    pa, pb = tmp_path / "a.png", tmp_path / "b.png"
    save_image(a, pa)
    save_image(b, pb)
    return pa, pb


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
