# tamt/__init__.py
"""任务无关的掩码训练 (task-agnostic mask training) 数值核心。"""

__version__ = '0.1.0'
