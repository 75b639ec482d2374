"""Information geometry of dropout: curvature, Fisher information and
alpha-integrated ensembles of masked multilayer perceptrons."""

from .data import Dataset, load_mnist, synth_blobs, write_idx
from .dropout_ensemble import (
    EnsembleResult,
    EnsembleSpec,
    flatness_gap,
    predict_integrated,
    run_ensemble,
)
from .errors import (
    CapacityError,
    DegenerateChartError,
    DegenerateMaskError,
    DomainError,
    EmptyMaskError,
    FormatError,
    GeodropError,
    NumericalError,
    ShapeError,
    SingularMetricError,
    UnsupportedError,
)
from .experiment import SweepConfig, SweepRow, run_sweep, summarize
from .fim import (
    FimEstimate,
    PhiRegularizer,
    exact_fim,
    fim_norm,
    fisher_embedding,
    hessian_split,
    kfac_fim,
    mc_fim,
    phi_value,
    train_with_phi,
)
from .geometry import (
    alpha_connection,
    curvature_report,
    dual_connection,
    induced_metric,
    levi_civita,
    riemann,
    scalar_curvature,
    second_fundamental_form,
    torsion,
    volume_ratio,
)
from .mixtures import (
    alpha_divergence,
    alpha_integrate,
    argmin_weighted_divergence,
    f_alpha,
    f_alpha_inv,
    f_mean,
)
from .models import (
    DropoutMask,
    MlpModel,
    TrainConfig,
    fit,
    forward,
    loss_and_grad,
    sample_masks,
    train_projection,
)
from .numerics import make_rng, sym_eig

__version__ = "0.1.0"
