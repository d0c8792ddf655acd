"""scikit-learn compatible wrapper around the nested MIL network."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelDims, bag_embedding, forward, init_params
from .train import TrainConfig, train
from .validation import check_bags, check_labels


class NmilClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Gated-attention nested MIL classifier.

    ``X`` is a sequence of bags. A bag is nested lists whose leaves are
    ``(n_instances, n_features)`` arrays; the nesting depth sets the number of
    MI blocks, so a bare instance array is ordinary MIL. ``transform``
    returns the bag-of-bags embeddings and ``attention_trees`` the per-level
    weights.
    """

    def __init__(
        self,
        hidden_dims=(128,),
        embed_dim=64,
        attention_dim=64,
        aggregator="sum",
        attention=True,
        learning_rate=0.01,
        max_epochs=100,
        patience=10,
        validation_fraction=0.2,
        threshold=0.5,
        random_state=0,
    ):
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.attention_dim = attention_dim
        self.aggregator = aggregator
        self.attention = attention
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        layouts = check_bags(X)
        y = check_labels(y, len(layouts))
        seed = 0 if self.random_state is None else int(self.random_state)
        dims = ModelDims(
            layouts[0].instances.shape[1],
            tuple(self.hidden_dims),
            self.embed_dim,
            self.attention_dim,
            layouts[0].levels,
        )
        model = init_params(dims, seed=seed, aggregator=self.aggregator, attention=self.attention)
        config = TrainConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            validation_fraction=self.validation_fraction,
            seed=seed,
            threshold=self.threshold,
        )
        validation = None
        if X_val is not None:
            val_layouts = check_bags(X_val, dims.levels, dims.input_dim)
            validation = list(zip(val_layouts, check_labels(y_val, len(val_layouts))))
        self.model_, self.history_ = train(model, list(zip(layouts, y)), config, validation=validation)
        self.classes_ = np.array([0, 1])
        self.n_levels_ = dims.levels
        self.n_features_in_ = dims.input_dim
        return self

    def _layouts(self, X):
        check_is_fitted(self, "model_")
        return check_bags(X, self.n_levels_, self.n_features_in_)

    def predict_proba(self, X):
        p = np.array([forward(self.model_, lay)[0] for lay in self._layouts(X)])
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def transform(self, X):
        return np.vstack([bag_embedding(self.model_, lay) for lay in self._layouts(X)])

    def attention_trees(self, X):
        """One :class:`~nmil.model.AttentionTree` per bag."""
        return [forward(self.model_, lay)[1] for lay in self._layouts(X)]
