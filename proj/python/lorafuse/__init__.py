# SPDX-License-Identifier: Apache-2.0
"""Heterogeneous LoRA adapter fusion toolkit."""

from ._core import (
    AdapterSet,
    ModuleKey,
    compute_delta_w,
    fuse,
    load_adapter,
    map_layer,
    module_vocabulary,
    rdm_loss,
    run_harness,
    save_adapter,
    stability_bound,
    svdvals,
    validate_adapter,
)

__all__ = [
    "AdapterSet",
    "ModuleKey",
    "compute_delta_w",
    "fuse",
    "load_adapter",
    "map_layer",
    "module_vocabulary",
    "rdm_loss",
    "run_harness",
    "save_adapter",
    "stability_bound",
    "svdvals",
    "validate_adapter",
]
