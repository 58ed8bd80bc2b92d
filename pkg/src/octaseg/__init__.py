"""Promptable OCTA segmentation toolkit.

Fine-tunes a SAM-style promptable segmentation model on OCTA en-face
projections with LoRA adapters, generates point prompts from label masks
in global and local modes, trains with Dice/clDice losses under k-fold
cross-validation, and serves interactive point-prompt inference.
"""

__version__ = "0.1.0"

from .data import (
    AugmentationConfig,
    Fov,
    FoldSplit,
    InputTransform,
    OctaSample,
    PromptMode,
    SegTask,
    StandardizedInput,
    TaskName,
    augment,
    load_dataset,
    make_folds,
    save_dataset,
    stack_projections,
    standardize_input,
)
from .prompts import (
    ComponentLabeling,
    PromptGenConfig,
    PromptPoint,
    PromptSet,
    adjacency_band,
    generate_global,
    generate_local,
    label_components,
    standardize_points,
)
from .losses import (
    LossConfig,
    cl_dice_loss,
    dice_loss,
    dice_metric,
    jaccard_metric,
    soft_skeleton,
    topo_precision,
    topo_sensitivity,
)
from .model import (
    AdaptedModel,
    LoraConfig,
    ModelConfig,
    build_model,
    decode_masks,
    encode_image,
    encode_prompts,
    inject_lora,
    load_adapter,
    load_checkpoint,
    save_adapter,
    select_best,
)
from .training import (
    EvalSummary,
    ResultsTable,
    TrainConfig,
    evaluate,
    lr_at,
    pick_loss,
    run_cv,
    synth_dataset,
    train_fold,
)
