"""ConvT few-shot recognition: model, hybrid loss, auto augmentation, training."""

from ._convt import (
    AutoAugConfig,
    ConfigError,
    ContractError,
    ConvTConfig,
    ConvTModel,
    DimensionError,
    EpochPolicy,
    StageParams,
    SynthConfig,
    TrainConfig,
    accuracy,
    apply_policy,
    cli,
    default_aug_k,
    evaluate,
    flops_estimate,
    gradcheck,
    hybrid_loss,
    lm_softmax_ce,
    load_chip_dataset,
    mine_triplets,
    policy_space_size,
    sample_epoch_policy,
    split_by_pose,
    synth_generate,
    train,
    transform,
    transform_names,
)

__all__ = [name for name in dir() if not name.startswith("_")]
