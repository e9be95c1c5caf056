# app/models.py
# 报告库：搜索结果、微调结果与训练轨迹。同时作为断点续跑的记录。
from datetime import datetime

from app import db


class SearchRecord(db.Model):
    __tablename__ = 'search_records'
    __table_args__ = (
        db.UniqueConstraint('spec_name', 'method', 'sparsity', 'seed', 'pretrain_steps',
                            name='uq_search_cell'),
    )
    id = db.Column(db.Integer, primary_key=True)
    spec_name = db.Column(db.String(100), index=True, nullable=False)
    method = db.Column(db.String(32), nullable=False)
    sparsity = db.Column(db.Float, nullable=False)
    seed = db.Column(db.Integer, nullable=False)
    pretrain_steps = db.Column(db.Integer, nullable=False, default=-1)
    checkpoint_path = db.Column(db.String(500))
    mlm_dev_loss = db.Column(db.Float)
    kd_dev_loss = db.Column(db.Float)
    wall_ms = db.Column(db.Float)
    status = db.Column(db.String(20), default='done', nullable=False)
    error = db.Column(db.Text)
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def key(self):
        return (self.method, round(self.sparsity, 6), self.seed, self.pretrain_steps)

    def __repr__(self):
        return f'<SearchRecord {self.method} S={self.sparsity} seed={self.seed} {self.status}>'


class FinetuneRecord(db.Model):
    __tablename__ = 'finetune_records'
    __table_args__ = (
        db.UniqueConstraint('spec_name', 'method', 'sparsity', 'seed', 'pretrain_steps', 'task',
                            'train_size', 'repeat', name='uq_finetune_cell'),
    )
    id = db.Column(db.Integer, primary_key=True)
    spec_name = db.Column(db.String(100), index=True, nullable=False)
    method = db.Column(db.String(32), nullable=False)
    sparsity = db.Column(db.Float, nullable=False)
    seed = db.Column(db.Integer, nullable=False)
    pretrain_steps = db.Column(db.Integer, nullable=False, default=-1)
    task = db.Column(db.String(64), nullable=False)
    metric_name = db.Column(db.String(20))
    value = db.Column(db.Float)
    raw_value = db.Column(db.Float)
    train_size = db.Column(db.Integer, nullable=False)
    repeat = db.Column(db.Integer, nullable=False, default=0)
    status = db.Column(db.String(20), default='done', nullable=False)
    error = db.Column(db.Text)
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def key(self):
        return (self.method, round(self.sparsity, 6), self.seed, self.pretrain_steps, self.task,
                self.train_size, self.repeat)

    def __repr__(self):
        return f'<FinetuneRecord {self.method} S={self.sparsity} {self.task}={self.value}>'


class TracePoint(db.Model):
    __tablename__ = 'trace_points'
    id = db.Column(db.Integer, primary_key=True)
    spec_name = db.Column(db.String(100), index=True, nullable=False)
    method = db.Column(db.String(32), nullable=False)
    sparsity = db.Column(db.Float, nullable=False)
    seed = db.Column(db.Integer, nullable=False)
    step = db.Column(db.Integer, nullable=False)
    wall_ms = db.Column(db.Float)
    train_loss = db.Column(db.Float)
    dev_mlm_loss = db.Column(db.Float)
    dev_kd_loss = db.Column(db.Float)
    sparsity_measured = db.Column(db.Float)
