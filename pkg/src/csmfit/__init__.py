"""Covariance-matrix-fitting beamforming.

Reconstructs positions, orientations, and power spectra of acoustic
monopole/dipole sources from microphone-array cross-spectral matrices by
global or local optimization of a broadband fitting energy, alongside
conventional-beamforming and CLEAN-SC baselines.
"""

from ._kernels import BACKEND
from .baseline import (
    FocusGrid,
    SourcePartSet,
    clean_sc,
    conventional_map,
    default_focus_grid,
)
from .csm import (
    CsmSet,
    SpectrumEstimate,
    ground_truth_psd,
    load_csm,
    save_csm,
    snapshot_csm,
    superpose,
    synthesize_csm,
    upper_tri_pairs,
)
from .energy import (
    EnergyFunction,
    EnergyLandscapeSlice,
    ParameterVector,
    SourceLayout,
    SourceTemplate,
    broadband_energy,
    find_local_maxima,
    find_local_minima,
    psf,
    slice_landscape,
    standard_energy,
    truth_vector,
)
from .optimize import (
    FitResult,
    OptimizerConfig,
    export_fit_json,
    global_fit,
    local_fit,
    multi_start,
    source_parts_from_fits,
    standard_fit_per_frequency,
)
from .postprocess import (
    MatchResult,
    Roi,
    SpectraReport,
    group_source_objects,
    group_sources,
    match_to_truth,
    roi_integrate,
)
from .propagation import (
    dipole_direction,
    dipole_green,
    greens_matrix,
    monopole_green,
    propagation_columns,
    steering_vector_iv,
)
from .scene import (
    FrequencyGrid,
    MicArray,
    Scene,
    SourceObject,
    builtin_case,
    db_from_power,
    dipole_axis_error,
    line_array,
    power_from_db,
    scene_from_dict,
    scene_to_dict,
)

__version__ = "0.1.0"
