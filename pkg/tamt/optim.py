# tamt/optim.py
import numpy as np

from tamt.errors import InvalidArgumentError


def linear_decay(lr, step, total_steps):
    """第 ``step`` 步 (从 0 计) 的学习率，在 ``total_steps`` 内线性衰减到 0。"""
    if total_steps <= 0:
        return lr
    return lr * max(0.0, 1.0 - step / float(total_steps))


class AdamW:
    """解耦权重衰减的 Adam，学习率线性衰减。"""

    def __init__(self, params, lr, total_steps, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        if lr <= 0:
            raise InvalidArgumentError(f'learning rate must be positive, got {lr}')
        self.params = list(params)
        self.lr = lr
        self.total_steps = total_steps
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self):
        return linear_decay(self.lr, self.step_count, self.total_steps)

    def step(self):
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            # 偏置和 LayerNorm 参数不做衰减
            if self.weight_decay and p.data.ndim > 1:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
