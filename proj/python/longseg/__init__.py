"""Python bindings for the longseg segmentation core."""

from ._longseg import (  # noqa: F401
    ConfigError,
    CrossFitResult,
    CrossHyper,
    DataError,
    FitError,
    FormatError,
    LabelVolume,
    LongFitResult,
    LongHyper,
    NumericError,
    TetMeshAtlas,
    Volume,
    cohens_d,
    cov_percent,
    dice,
    fit_cross,
    fit_longitudinal,
    generate_test_subject,
    log_transform,
    rasterize_priors,
    read_atlas,
    read_lseg,
    read_lvol,
    read_nifti,
    segment,
    set_wm_class,
    structure_volumes,
    student_t_two_sided_p,
    welch_t,
    write_atlas,
    write_lseg,
    write_lvol,
)

__all__ = [name for name in dir() if not name.startswith("_")]
