"""Protocol constants and reference settings.

These are the tuning grids, subsampling protocol numbers, and best-setting
tables the benchmark treats as defaults. Experiment configs may override the
grids explicitly; overrides are recorded in the run manifest.
"""

# ---- subsampling protocol -------------------------------------------------

SUBSAMPLE_SIZES = (100, 200, 400, 800, 1600, 3200)
SUBSAMPLE_POSITIVE_RATE = 0.1
SUBSAMPLE_TRAIN_FRACTION = 0.7
SUBSAMPLE_REPEATS = 10

# ---- language model grid --------------------------------------------------

CLMBR_EMBEDDING_GRID = (400, 800)
CLMBR_HIDDEN_GRID = (400, 800, 1600)
CLMBR_LR_GRID = (1e-2, 1e-3, 1e-4, 1e-5)
CLMBR_L2_GRID = (0.1, 0.01, 0.001)
CLMBR_DROPOUT_GRID = (0.0, 0.1, 0.2)
CLMBR_EPOCHS = 50
CLMBR_BATCH_DAYS = 2000

# best settings found for the two published model sizes
CLMBR_REFERENCE_BEST = {
    400: {"gru_hidden": 800, "lr": 1e-3, "l2": 0.01, "dropout": 0.1, "epochs": 20},
    800: {"gru_hidden": 1600, "lr": 1e-3, "l2": 0.1, "dropout": 0.1, "epochs": 40},
}

# ---- end-to-end sequence classifier ----------------------------------------

E2E_REFERENCE_BEST = {
    "inpatient_mortality": {
        "embedding_size": 100, "gru_hidden": 400, "lr": 1e-2, "l2": 0.1,
        "dropout": 0.1, "epochs": 21,
    },
    "long_admission": {
        "embedding_size": 400, "gru_hidden": 100, "lr": 1e-2, "l2": 0.1,
        "dropout": 0.1, "epochs": 28,
    },
    "icu_transfer": {
        "embedding_size": 400, "gru_hidden": 400, "lr": 1e-3, "l2": 0.001,
        "dropout": 0.0, "epochs": 0,
    },
    "readmission_30d": {
        "embedding_size": 400, "gru_hidden": 100, "lr": 1e-2, "l2": 0.1,
        "dropout": 0.0, "epochs": 24,
    },
    "abnormal_hba1c": {
        "embedding_size": 400, "gru_hidden": 200, "lr": 1e-3, "l2": 0.01,
        "dropout": 0.1, "epochs": 1,
    },
}

# ---- baseline representations ----------------------------------------------

WORD2VEC_DIM = 300
LSI_RANK_GRID = (400, 800)

# best (representation variant, model type, key settings) per task at full
# training size; kept as reference data for config defaults
TASK_REFERENCE_BEST = {
    "inpatient_mortality": {
        "counts": ("with_ontology_expansion", "gbt",
                   {"num_leaves": 100, "num_boost_round": 317, "learning_rate": 0.02}),
        "word2vec": ("concat_max_mean_min", "logistic", {"C": 0.01}),
        "lsi": ("size_800", "gbt",
                {"num_leaves": 10, "num_boost_round": 250, "learning_rate": 0.02}),
        "clmbr": ("size_800", "logistic", {"C": 0.001}),
    },
    "long_admission": {
        "counts": ("with_time_bins", "gbt",
                   {"num_leaves": 100, "num_boost_round": 292, "learning_rate": 0.02}),
        "word2vec": ("concat_max_mean_min", "gbt",
                     {"num_leaves": 100, "num_boost_round": 360, "learning_rate": 0.02}),
        "lsi": ("size_800", "gbt",
                {"num_leaves": 100, "num_boost_round": 494, "learning_rate": 0.02}),
        "clmbr": ("size_800", "gbt",
                  {"num_leaves": 100, "num_boost_round": 397, "learning_rate": 0.02}),
    },
    "icu_transfer": {
        "counts": ("with_time_bins", "gbt",
                   {"num_leaves": 100, "num_boost_round": 43, "learning_rate": 0.02}),
        "word2vec": ("with_ontology_expansion+concat_max_mean_min", "logistic", {"C": 1.0}),
        "lsi": ("size_800", "logistic", {"C": 1e6}),
        "clmbr": ("size_800", "logistic", {"C": 1e-5}),
    },
    "readmission_30d": {
        "counts": ("with_time_bins", "gbt",
                   {"num_leaves": 100, "num_boost_round": 159, "learning_rate": 0.02}),
        "word2vec": ("concat_max_mean_min", "gbt",
                     {"num_leaves": 100, "num_boost_round": 215, "learning_rate": 0.02}),
        "lsi": ("size_400", "gbt",
                {"num_leaves": 100, "num_boost_round": 188, "learning_rate": 0.02}),
        "clmbr": ("size_800", "gbt",
                  {"num_leaves": 100, "num_boost_round": 282, "learning_rate": 0.02}),
    },
    "abnormal_hba1c": {
        "counts": ("with_ontology_expansion", "gbt",
                   {"num_leaves": 100, "num_boost_round": 73, "learning_rate": 0.1}),
        "word2vec": ("concat_max_mean_min", "gbt",
                     {"num_leaves": 25, "num_boost_round": 21, "learning_rate": 0.1}),
        "lsi": ("size_800", "gbt",
                {"num_leaves": 10, "num_boost_round": 63, "learning_rate": 0.1}),
        "clmbr": ("size_800", "logistic", {"C": 0.01}),
    },
}
