"""Independent spreadsheet oracle for the neural kernels.

Run once with `python3 tests/oracles/nets_oracle.py`; the printed numbers
are copied into the test modules as frozen literals and this file is not
imported by the suite afterwards. Everything here is plain numpy written
directly from the layer definitions, no shared code with src/.
"""
import math

import numpy as np


def leaky(x, slope=0.2):
    return np.where(x >= 0, x, slope * x)


def elu(x):
    return np.where(x >= 0, x, np.expm1(x))


def softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    s = sum(es)
    return [e / s for e in es]


# --- multi-head attention on a 3-node path, 1-dim features, 1 head ------
# nodes 0-1-2, neighborhoods with self loops
NEI = {0: [0, 1], 1: [0, 1, 2], 2: [1, 2]}
H = [1.0, 2.0, -1.0]
W = 0.5            # head projection, 1x1
A_HEAD = (0.3, -0.2)   # attention vector, length 2F' = 2
W_F = -0.7         # fusion projection, 1x1
A_FUS = (0.4, 0.1)


def gat_path_oracle():
    wh = [W * h for h in H]
    hidden = []
    for i in range(3):
        scores = [leaky(A_HEAD[0] * wh[i] + A_HEAD[1] * wh[j]) for j in NEI[i]]
        alpha = softmax(scores)
        hidden.append(float(elu(sum(a * wh[j] for a, j in zip(alpha, NEI[i])))))
    out = []
    for i in range(3):
        scores = [
            leaky(A_FUS[0] * W_F * hidden[i] + A_FUS[1] * W_F * hidden[j])
            for j in NEI[i]
        ]
        alpha = softmax(scores)
        out.append(
            float(elu(sum(a * W_F * hidden[j] for a, j in zip(alpha, NEI[i]))))
        )
    return hidden, out


# --- tanh-Gaussian closed forms -----------------------------------------

def tanh_gauss_logp(mu, sigma, eps, eps_num=1e-6):
    ahat = mu + sigma * eps
    a = math.tanh(ahat)
    logn = -0.5 * math.log(2 * math.pi) - math.log(sigma) - 0.5 * eps * eps
    return a, logn - math.log(1 - a * a + eps_num)


# --- central SAC losses, 1-dim affine nets, batch of one ----------------
# critic params (w_h, w_a, b), actor trunk affine: mu = m_h*h + m_b,
# log_sigma = s_h*h + s_b. Temperature alpha fixed. One transition.

CEN = dict(
    q1=(0.4, -0.3, 0.1), q2=(-0.2, 0.5, 0.0),
    tq1=(0.35, -0.25, 0.05), tq2=(-0.15, 0.45, 0.02),
    actor=(0.6, -0.1, -0.4, 0.2),  # m_h, m_b, s_h, s_b
    alpha=0.7, gamma=0.99,
    h=0.5, a=0.2, r=1.0, h2=-0.3, d=0.0,
    eps_next=0.3, eps_cur=-0.8, target_entropy=-1.0,
)


def affine_q(p, h, a):
    return p[0] * h + p[1] * a + p[2]


def central_losses_oracle(c=CEN):
    m_h, m_b, s_h, s_b = c["actor"]

    def pol(h, eps):
        mu = m_h * h + m_b
        sig = math.exp(s_h * h + s_b)
        return tanh_gauss_logp(mu, sig, eps)

    a2, logp2 = pol(c["h2"], c["eps_next"])
    tq = min(affine_q(c["tq1"], c["h2"], a2), affine_q(c["tq2"], c["h2"], a2))
    y = c["r"] + c["gamma"] * (1 - c["d"]) * (tq - c["alpha"] * logp2)
    l_q1 = 0.5 * (affine_q(c["q1"], c["h"], c["a"]) - y) ** 2
    l_q2 = 0.5 * (affine_q(c["q2"], c["h"], c["a"]) - y) ** 2

    a1, logp1 = pol(c["h"], c["eps_cur"])
    qmin = min(affine_q(c["q1"], c["h"], a1), affine_q(c["q2"], c["h"], a1))
    l_pi = c["alpha"] * logp1 - qmin
    l_alpha = -c["alpha"] * (logp1 + c["target_entropy"])
    return dict(y=y, l_q1=l_q1, l_q2=l_q2, l_pi=l_pi, l_alpha=l_alpha,
                a_next=a2, logp_next=logp2, a_cur=a1, logp_cur=logp1)


# --- quadratic meta-gradient closed form --------------------------------
# inner loss a(w-b)^2, query loss c(w-d)^2, step eta, plain GD.

def quad_meta_grad(a, b, c, d, eta, w0, steps):
    w = w0
    for _ in range(steps):
        w = w - eta * 2 * a * (w - b)
    return (1 - 2 * eta * a) ** steps * 2 * c * (w - d), w


if __name__ == "__main__":
    hid, out = gat_path_oracle()
    print("gat hidden:", [f"{v:.15f}" for v in hid])
    print("gat out   :", [f"{v:.15f}" for v in out])

    a, lp = tanh_gauss_logp(0.0, 1.0, 0.0)
    print(f"logp(mu=0,sig=1,eps=0) = {lp:.15f}")
    a, lp = tanh_gauss_logp(0.4, 0.5, 1.2)
    print(f"logp(mu=.4,sig=.5,eps=1.2): a={a:.15f} lp={lp:.15f}")

    for k, v in central_losses_oracle().items():
        print(f"central {k} = {v:.15f}")

    for steps in (1, 2):
        g, wl = quad_meta_grad(0.7, 0.3, 1.1, -0.5, 0.05, 1.2, steps)
        print(f"quad L={steps}: w_L={wl:.15f} meta_grad={g:.15f}")
