"""ssrkit: converter impedance sweeps and sub-synchronous resonance margins.

The toolkit simulates the workload-dependent input impedance of a PFC
(power-factor-correction) converter with two-tone frequency sweeps, fits a
small dense-network surrogate to the swept impedance, and uses the surrogate
with a Nyquist-distance metric and Bayesian optimization to compute safety
margins, raise early warnings, and recommend preventive workload setpoints.
"""

from .pfc import (
    DivergenceError,
    PfcParams,
    PfcState,
    SettleTimeoutError,
    SourceSpec,
    Trajectory,
    cold_start_state,
    derivative,
    extract_input_current,
    integrate,
    load_params,
    settle,
)
from .sweep import (
    ImpedanceDataset,
    ImpedancePoint,
    OracleBranch,
    PhasorMeasurement,
    SweepConfig,
    aggregate_parallel,
    coherent_window,
    generate_dataset,
    measure_impedance,
    single_bin_dft,
    two_tone_voltage,
)

__version__ = "0.1.0"
