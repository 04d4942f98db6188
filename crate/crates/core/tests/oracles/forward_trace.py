"""Straight-line forward pass of the one-block token model for a single sample.

Used to freeze the expected logits and loss in tests/model_trace.rs.
Run: python3 forward_trace.py
"""
import numpy as np

lam = 1e8
X = np.array([[1.0, -2.0], [0.5, 1.5]])          # phi=2 tokens, input_dim=2
label = 1
We = np.array([[0.5, -0.3], [0.2, 0.8]])
be = np.array([0.1, -0.1])
g = np.array([0.3, 0.6])
Wq = np.array([[1.0, 0.5], [-0.5, 1.0]])
Wk = np.array([[0.7, -0.2], [0.4, 0.9]])
Wv = np.array([[0.6, 0.1], [-0.3, 0.8]])
P = np.array([[1.0, -1.0], [0.5, 0.5]])
Wh = np.array([[0.9, -0.4], [0.2, 0.3]])
bh = np.array([0.05, -0.05])

M = np.vstack([g, X @ We + be])
S = np.array([[0, lam, lam], [0, 0, lam], [0, lam, 0]], dtype=float)
Q, K, V = M @ Wq, M @ Wk, M @ Wv
Z = (Q @ K.T - S) / np.sqrt(2.0)
A = np.exp(Z - Z.max(axis=1, keepdims=True))
A = A / A.sum(axis=1, keepdims=True)
O = A @ V
R = M + O @ P
h = R.mean(axis=0)
logits = h @ Wh + bh
loss = -(logits[label] - np.log(np.exp(logits).sum()))
np.set_printoptions(precision=17)
print("weights", repr(A))
print("output", repr(O))
print("logits", repr(logits))
print("loss", repr(loss))
