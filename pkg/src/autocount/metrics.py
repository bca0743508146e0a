"""Count-agreement metrics between annotated and predicted counts."""
import numpy as np


def _pairs(annotated, predicted):
    y = np.asarray(annotated, dtype=np.float64).ravel()
    yhat = np.asarray(predicted, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} annotated vs {yhat.size} predicted")
    if y.size == 0:
        raise ValueError("need at least one count pair")
    if (y < 0).any() or (yhat < 0).any():
        raise ValueError("counts must be non-negative")
    return y, yhat


def mae(annotated, predicted) -> float:
    y, yhat = _pairs(annotated, predicted)
    return float(np.mean(np.abs(y - yhat)))


def rmse(annotated, predicted) -> float:
    y, yhat = _pairs(annotated, predicted)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def r_squared(annotated, predicted) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot about the annotated mean.

    This is not the squared Pearson correlation; predictions worse than the
    annotated mean give negative values.
    """
    y, yhat = _pairs(annotated, predicted)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if y.size < 2 or ss_tot == 0.0:
        raise ValueError("R^2 is undefined for fewer than 2 pairs or constant annotated counts")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def summarize(annotated, predicted) -> dict:
    return {"MAE": mae(annotated, predicted), "RMSE": rmse(annotated, predicted),
            "R2": r_squared(annotated, predicted)}
