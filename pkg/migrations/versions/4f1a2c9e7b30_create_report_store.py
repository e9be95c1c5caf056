"""Create report store

Revision ID: 4f1a2c9e7b30
Revises: 
Create Date: 2026-10-17 10:12:05.118204

"""
from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision = '4f1a2c9e7b30'
down_revision = None
branch_labels = None
depends_on = None


def upgrade():
    op.create_table('search_records',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('spec_name', sa.String(length=100), nullable=False),
    sa.Column('method', sa.String(length=32), nullable=False),
    sa.Column('sparsity', sa.Float(), nullable=False),
    sa.Column('seed', sa.Integer(), nullable=False),
    sa.Column('pretrain_steps', sa.Integer(), nullable=False),
    sa.Column('checkpoint_path', sa.String(length=500), nullable=True),
    sa.Column('mlm_dev_loss', sa.Float(), nullable=True),
    sa.Column('kd_dev_loss', sa.Float(), nullable=True),
    sa.Column('wall_ms', sa.Float(), nullable=True),
    sa.Column('status', sa.String(length=20), nullable=False),
    sa.Column('error', sa.Text(), nullable=True),
    sa.Column('created_at', sa.DateTime(), nullable=True),
    sa.PrimaryKeyConstraint('id'),
    sa.UniqueConstraint('spec_name', 'method', 'sparsity', 'seed', 'pretrain_steps', name='uq_search_cell')
    )
    with op.batch_alter_table('search_records', schema=None) as batch_op:
        batch_op.create_index(batch_op.f('ix_search_records_spec_name'), ['spec_name'], unique=False)

    op.create_table('finetune_records',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('spec_name', sa.String(length=100), nullable=False),
    sa.Column('method', sa.String(length=32), nullable=False),
    sa.Column('sparsity', sa.Float(), nullable=False),
    sa.Column('seed', sa.Integer(), nullable=False),
    sa.Column('pretrain_steps', sa.Integer(), nullable=False),
    sa.Column('task', sa.String(length=64), nullable=False),
    sa.Column('metric_name', sa.String(length=20), nullable=True),
    sa.Column('value', sa.Float(), nullable=True),
    sa.Column('raw_value', sa.Float(), nullable=True),
    sa.Column('train_size', sa.Integer(), nullable=False),
    sa.Column('repeat', sa.Integer(), nullable=False),
    sa.Column('status', sa.String(length=20), nullable=False),
    sa.Column('error', sa.Text(), nullable=True),
    sa.Column('created_at', sa.DateTime(), nullable=True),
    sa.PrimaryKeyConstraint('id'),
    sa.UniqueConstraint('spec_name', 'method', 'sparsity', 'seed', 'pretrain_steps', 'task', 'train_size', 'repeat', name='uq_finetune_cell')
    )
    with op.batch_alter_table('finetune_records', schema=None) as batch_op:
        batch_op.create_index(batch_op.f('ix_finetune_records_spec_name'), ['spec_name'], unique=False)

    op.create_table('trace_points',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('spec_name', sa.String(length=100), nullable=False),
    sa.Column('method', sa.String(length=32), nullable=False),
    sa.Column('sparsity', sa.Float(), nullable=False),
    sa.Column('seed', sa.Integer(), nullable=False),
    sa.Column('step', sa.Integer(), nullable=False),
    sa.Column('wall_ms', sa.Float(), nullable=True),
    sa.Column('train_loss', sa.Float(), nullable=True),
    sa.Column('dev_mlm_loss', sa.Float(), nullable=True),
    sa.Column('dev_kd_loss', sa.Float(), nullable=True),
    sa.Column('sparsity_measured', sa.Float(), nullable=True),
    sa.PrimaryKeyConstraint('id')
    )
    with op.batch_alter_table('trace_points', schema=None) as batch_op:
        batch_op.create_index(batch_op.f('ix_trace_points_spec_name'), ['spec_name'], unique=False)


def downgrade():
    with op.batch_alter_table('trace_points', schema=None) as batch_op:
        batch_op.drop_index(batch_op.f('ix_trace_points_spec_name'))
    op.drop_table('trace_points')
    with op.batch_alter_table('finetune_records', schema=None) as batch_op:
        batch_op.drop_index(batch_op.f('ix_finetune_records_spec_name'))
    op.drop_table('finetune_records')
    with op.batch_alter_table('search_records', schema=None) as batch_op:
        batch_op.drop_index(batch_op.f('ix_search_records_spec_name'))
    op.drop_table('search_records')
