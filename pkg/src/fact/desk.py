"""Desk-scale transfer experiment: shared defaults for the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import replace

from fact import checkpoint as ck
from fact import data, training, vit

BACKBONE = dict(L=4, d=64, heads=4, image_size=16, patch_size=4)
SOURCE = data.SyntheticSpec(seed=0, classes=4, train=2000, val=200, test=200)
TARGET = SOURCE.shifted(rotation=90.0, contrast=0.5, train=800, val=200, test=400)
SOURCE_SPEC = "synthetic:seed=0,classes=4,train=2000,val=200,test=200"
TARGET_SPEC = "synthetic:seed=0,classes=4,rotation=90,contrast=0.5,train=800,val=200,test=400"
PRETRAIN = training.TrainConfig(mode="full", epochs=15, warmup_epochs=2, batch_size=64)
FINETUNE = training.TrainConfig(mode="fact-tt", epochs=100, warmup_epochs=10, batch_size=64,
                                eval_every=100)


def backbone_config(num_classes=4):
    return vit.vit_config(num_classes=num_classes, **BACKBONE)


def pretrain_backbone(seed=0, metrics=None):
    """Seeded source-task backbone (all weights trained from random init)."""
    res = training.pretrain(backbone_config(SOURCE.classes), data.generate_synthetic(SOURCE),
                            replace(PRETRAIN, seed=seed), metrics, init_seed=seed)
    return res.model


def finetune(backbone, target, mode="fact-tt", rank=4, scale=1.0, seed=0, metrics=None):
    cfg = replace(FINETUNE, mode=mode, rank=rank, scale_s=scale, seed=seed)
    return training.train(backbone, target, cfg, metrics)


def size_ratio(result, backbone):
    """Factor checkpoint bytes over backbone container bytes."""
    return len(ck.encode_checkpoint(result.checkpoint)) / len(ck.encode_backbone(backbone))
