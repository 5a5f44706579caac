#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

ENV_CONF_FILE = 'SSFER_CONF_FILE'
ENV_CONF_SECTION = 'SSFER_CONF_SECTION'
ENV_DEVELOPER_ENV = 'SSFER_DEVELOPER_ENV'
ENV_THREADS = 'SSFER_THREADS'

# pretraining stage
DEFAULT_PRETRAIN_LR = 3.4e-4
DEFAULT_PRETRAIN_EPOCHS = 600
DEFAULT_PRETRAIN_WARMUP_EPOCHS = 50
DEFAULT_PRETRAIN_BATCH_SIZE = 256
DEFAULT_MASK_RATIO = 0.75
PRETRAIN_BETAS = (0.9, 0.95)
DEFAULT_WEIGHT_DECAY = 0.05

# supervised fine-tuning stage
DEFAULT_SUPERVISED_LR = 1.0e-4
DEFAULT_SUPERVISED_MIN_LR = 1e-5
DEFAULT_SUPERVISED_WARMUP_INIT_LR = 5e-5
DEFAULT_SUPERVISED_EPOCHS = 100
DEFAULT_SUPERVISED_WARMUP_EPOCHS = 5
DEFAULT_SUPERVISED_BATCH_SIZE = 32
DEFAULT_MIX_ALPHA = 0.2
SMALL_LABEL_THRESHOLD = 500
SMALL_LABEL_EPOCH_FACTOR = 10

# semi-supervised fine-tuning stage
DEFAULT_SEMISUP_LR = 1.5e-4
DEFAULT_SEMISUP_EPOCHS = 50
DEFAULT_SEMISUP_BATCH_SIZE = 64
DEFAULT_TAU = 0.95
DEFAULT_MU = 1.0
DEFAULT_EMA_MOMENTUM = 0.999

# augmentation
DEFAULT_CROP_SCALE = (0.8, 1.0)
CROP_RATIO_RANGE = (3. / 4., 4. / 3.)
DEFAULT_FLIP_PROB = 0.5
DEFAULT_RANDAUGMENT_OPS = 2
DEFAULT_RANDAUGMENT_MAGNITUDE = 9
GEOMETRIC_FILL = 0.5

# similarity metrics
PSNR_CAP_DB = 50.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
FSIM_T1 = 1e-3
FSIM_T2 = 160.0 / 255.0 ** 2

# reconstruction targets
TARGET_STD_FLOOR = 1e-6

# evaluation
SALIENCY_THRESHOLD = 0.3
ATTACK_EPSILONS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
EVAL_BATCH_SIZE = 256

# hyperparameter search
LR_SEARCH_BOUNDS = (1e-6, 1e-2)
DEFAULT_WOLVES = 8
DEFAULT_GWO_ITERATIONS = 10

# experiments
NOISE_RATIOS = (0.0, 0.1, 0.2, 0.3)
DEFAULT_KFOLD = 5
MASK_STUDY_SAMPLES = 16

# file names inside a checkpoint directory
CHECKPOINT_MANIFEST = 'manifest.json'
CHECKPOINT_BLOB = 'tensors.bin'
RUN_MANIFEST = 'run_manifest.json'
