import pytest

from dagman.config import DistillConfig, EncoderConfig, PretrainConfig
from dagman.volume_data import SyntheticSpec, generate_synthetic_volume


def tiny_config(**kw) -> PretrainConfig:
    """D0=8 on 8^3 inputs: stage grids 8, 4, 2, 1."""
    enc = EncoderConfig(
        input_shape=(8, 8, 8), patch_size=(1, 1, 1), window_size=(2, 2, 2),
        stage_depths=(1, 1, 1, 1), stage_heads=(1, 2, 2, 4), embed_dim=8, sa_depth=1,
    )
    dist = DistillConfig(k_cls=16, k_patch=16, k_g=16, head_hidden_mult=2, head_bottleneck=8)
    base = dict(
        encoder=enc, distill=dist, steps=4, warmup_steps=1, batch_size=2, crop_shape=(8, 8, 8),
        student_path_drop=0.0, base_lr=1e-3,
    )
    base.update(kw)
    return PretrainConfig(**base)


def tiny_volumes(n=4, shape=(12, 12, 12)):
    return [
        generate_synthetic_volume(
            SyntheticSpec(shape=shape, num_lesions=1, lesion_radius_range=(2.0, 3.0), class_id=i % 2), seed=i
        )
        for i in range(n)
    ]


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def volumes():
    return tiny_volumes()
