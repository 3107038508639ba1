"""Oracle-verified quantum-transport pipeline on block-tridiagonal
device Hamiltonians: selected solves of open-boundary quadratic matrix
problems, self-consistent interaction self-energies via FFT energy
convolutions, spatially distributed solving, and device observables.
"""

from .bench import (
    OverheadPoint,
    SweepPoint,
    SweepReport,
    WeakScalingPoint,
    bench_block_size,
    bench_chain_length,
    bench_convolution,
    bench_partition_overhead,
    bench_weak_scaling,
    fit_loglog_slope,
    partition_overhead_model,
    partition_solve_flops,
    sequential_solve_flops,
)
from .blocks import (
    FULL,
    LG_COMPRESSED,
    BlockMatrix,
    bt_multiply,
    reverse_blocks,
    symmetrize_lg,
    truncate_bandwidth,
)
from .constants import KT_DEFAULT, SPIN_DEGENERACY
from .convolve import (
    MODE_CONVOLUTION,
    MODE_CORRELATION,
    EntryPattern,
    EntrySpectra,
    convolve_energy,
    convolve_energy_direct,
    retarded_from_lg,
)
from .device import (
    DeviceSpec,
    EnergyGrid,
    apply_rcut,
    assemble_from_puc,
    fermi,
)
from .deviceio import (
    device_from_wannier,
    load_device,
    load_wannier_hr,
    save_device,
)
from .dist import (
    BACKEND_IN_PROCESS,
    BACKEND_MULTI_PROCESS,
    Communicator,
    DistStats,
    PartitionPlan,
    SerialCommunicator,
    dist_selected_solve,
    halo_bt_multiply,
    make_partition_plan,
    spmd_run,
)
from .driver import (
    EXIT_CONVERGED,
    EXIT_ERROR,
    EXIT_MAX_ITER,
    FlopModel,
    RunConfig,
    RunOutput,
    assemble_device,
    check_oracle,
    config_from_dict,
    load_config,
    run,
    write_report,
    write_tables,
)
from .errors import (
    BlockStructureError,
    ConfigError,
    ConvergenceError,
    DeviceFormatError,
    NegfError,
    PartitionError,
    SingularBlockError,
    SpectralRadiusError,
)
from .flops import FlopCounter, recording
from .obc import (
    SIDE_LEFT,
    SIDE_RIGHT,
    ContactBlocks,
    ObcSigma,
    SurfaceCache,
    SurfaceResult,
    fixed_point_step,
    lyapunov_solve,
    memoized_obc,
    obc_beyn,
    obc_fixed_point,
    obc_sancho_rubio,
    recursion_residual,
    sigma_lg_obc,
    spectral_radius_estimate,
    stein_geometric,
)
from .rgf import (
    KIND_GREATER,
    KIND_LESSER,
    SelectedSolution,
    dense_selected_oracle,
    selected_solve,
)
from .scba import (
    KERNEL_CATEGORIES,
    RETARDED_METHODS,
    BeynOptions,
    ContactConfig,
    MemoizerOptions,
    ScbaOptions,
    ScbaResult,
    SigmaState,
    TranspositionStats,
    assemble_g_system,
    assemble_w_system,
    bond_currents,
    caroli_transmission,
    current_spectrum,
    dos,
    electron_density,
    energy_chunks,
    landauer_current,
    scba_run,
    terminal_current,
    transpose_distribution,
)
from .toys import (
    chain_device,
    coulomb_matrix,
    random_bt_system,
    random_device,
    random_lead,
)

__version__ = "0.1.0"
