"""Named settings for the desk-scale synthetic runs.

``TOY_TES`` is the stage-1 schedule used on the 160-instance synthetic set:
at the full-scale learning rate of 0.1 the τ_a = 0.01 align loss diverges on
so few instances, so the toy schedule trades a smaller rate for more epochs.
"""

from .data import SyntheticDatasetSpec

TOY_TES = {"epochs": 500, "batch_size": 32, "learning_rate": 0.003}

# instances of a pair share one visual anchor; the image encoder sees their
# distinguishing text latent at a fifth of its scale
COMPLEMENTARY = {"visual_share": 2, "text_dim": 4, "text_visibility": 0.2}
COMPLEMENTARY_TES = {"epochs": 1000, "batch_size": 32, "learning_rate": 0.003}


def standard_spec(seed=0, **overrides):
    return SyntheticDatasetSpec(seed=seed, **overrides)


def complementary_spec(seed=0, **overrides):
    """Classes overlap pairwise in the visual subspace, separate in the text one."""
    return SyntheticDatasetSpec(seed=seed, **{**COMPLEMENTARY, **overrides})


def config_lines(tes=TOY_TES, data=None):
    """Config-file lines selecting the given stage-1 schedule and data overrides."""
    lines = [f"tes.{k} = {v}" for k, v in tes.items()]
    lines += [f"data.{k} = {v}" for k, v in (data or {}).items()]
    return "\n".join(lines) + "\n"
