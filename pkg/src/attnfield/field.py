"""The conditioned radiance field: per-view source embeddings, four
attention decoders (density/color over the source-view set, density/color
over sliding ray windows), and scalar (sigma, rgb) output heads.

The whole query path is batched over flattened ray samples: shapes are
(P, tokens, width) where P = rays * samples_per_ray, so one forward pass
serves an entire ray batch.
"""

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .geometry import project_points

_DEPTH_PE_SCALE = 2.0 * np.pi  # frequency scale for the depth channel of E^pos


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 2          # attention blocks per decoder
    heads: int = 4
    d_model: int = 64
    d_ffn: int = 128
    c_feat: int = 16         # feature-extractor output channels
    feat_hidden: int = 16
    freq_levels: int = 4     # frequency-embedding levels for retrieved colors
    window_n: int = 2        # ray-window half width
    seed: int = 0

    @property
    def d_head(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        return self.d_model // self.heads

    @property
    def color_dim(self):
        return 6 * self.freq_levels  # gamma(rgb) width

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class SourceView:
    """A conditioning view: image, pixel-aligned feature map, camera."""

    image: np.ndarray          # (H, W, 3) in [0, 1]
    features: T.DiffTensor     # (H, W, c_feat), spatially aligned with image
    camera: object

    def __post_init__(self):
        if self.image.shape[:2] != tuple(self.features.shape[:2]):
            raise ValueError("feature map is not spatially aligned with the image")


@dataclass
class PointContext:
    """Per-view retrievals for a batch of query points (P points, M views)."""

    positions: np.ndarray      # (P, 3)
    d_tgt: np.ndarray          # (P, 3) unit target-view directions
    colors: np.ndarray         # (P, M, 3) retrieved source colors, zero if invalid
    features: T.DiffTensor     # (P, M, c_feat), zero rows where invalid
    d_src: np.ndarray          # (P, M, 3) unit source-view directions, zero if invalid
    valid: np.ndarray          # (P, M) bool


class FieldModel:
    """All learnable parameters of the conditioned field, in one ParamStore."""

    def __init__(self, config=None, store=None):
        self.config = config or ModelConfig()
        cfg = self.config
        d = cfg.d_model
        self.params = store if store is not None else T.ParamStore(cfg.seed)
        p = self.params
        fresh = store is None

        def blocks(prefix, **kw):
            return [nn.init_block(p, f"{prefix}.block{i}", d, cfg.d_ffn, cfg.heads,
                                  cfg.d_head, **kw) for i in range(cfg.blocks)]

        if fresh:
            self.extractor = nn.init_feature_extractor(p, "extractor", cfg.c_feat,
                                                       cfg.feat_hidden)
            embed_in = cfg.c_feat + cfg.color_dim + 3 + 1
            self.src_w = p.create("source_embed.w", (embed_in, d), fan_in=embed_in)
            self.src_b = p.create("source_embed.b", (d,), fan_in=embed_in)
            self.x0_sigma = p.create("density_view.query_embed", (d,), fan_in=d)
            self.density_view_blocks = blocks("density_view")
            self.sigma0_w = p.create("density_ray.input.w", (d + 3, d), fan_in=d + 3)
            self.sigma0_b = p.create("density_ray.input.b", (d,), fan_in=d + 3)
            self.density_ray_blocks = blocks("density_ray")
            self.sigma_head_w = p.create("density_head.w", (d, 1), fan_in=d)
            self.sigma_head_b = p.create("density_head.b", (1,), fan_in=d)
            self.y0_fc_w = p.create("color_view.query.fc.w", (d, d), fan_in=d)
            self.y0_fc_b = p.create("color_view.query.fc.b", (d,), fan_in=d)
            self.y0_proj_w = p.create("color_view.query.proj.w", (d + 3, d), fan_in=d + 3)
            self.y0_proj_b = p.create("color_view.query.proj.b", (d,), fan_in=d + 3)
            self.key_fc_w = p.create("color_view.key.fc.w", (d, d), fan_in=d)
            self.key_fc_b = p.create("color_view.key.fc.b", (d,), fan_in=d)
            self.color_view_blocks = blocks("color_view", d_kk=d + 3, d_v=cfg.color_dim)
            self.color_ray_blocks = blocks("color_ray")
            self.color_head_w = p.create("color_head.w", (d, 3), fan_in=d)
            self.color_head_b = p.create("color_head.b", (3,), fan_in=d)
        else:
            self._rebind()

    def _rebind(self):
        """Rebuild typed views onto an already-populated ParamStore."""
        cfg, p, d = self.config, self.params, self.config.d_model

        def attn(prefix):
            a = nn.AttentionParams(p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"],
                                   p[f"{prefix}.wo"], cfg.heads, cfg.d_head, d)
            return a

        def block(prefix):
            return nn.BlockParams(attn(f"{prefix}.attn"),
                                  p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"],
                                  p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"],
                                  p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"],
                                  p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"])

        def blocks(prefix):
            return [block(f"{prefix}.block{i}") for i in range(cfg.blocks)]

        self.extractor = nn.FeatureExtractorParams(
            p["extractor.conv1.w"], p["extractor.conv1.b"],
            p["extractor.conv2.w"], p["extractor.conv2.b"],
            p["extractor.conv3.w"], p["extractor.conv3.b"])
        self.src_w, self.src_b = p["source_embed.w"], p["source_embed.b"]
        self.x0_sigma = p["density_view.query_embed"]
        self.density_view_blocks = blocks("density_view")
        self.sigma0_w, self.sigma0_b = p["density_ray.input.w"], p["density_ray.input.b"]
        self.density_ray_blocks = blocks("density_ray")
        self.sigma_head_w, self.sigma_head_b = p["density_head.w"], p["density_head.b"]
        self.y0_fc_w, self.y0_fc_b = p["color_view.query.fc.w"], p["color_view.query.fc.b"]
        self.y0_proj_w, self.y0_proj_b = p["color_view.query.proj.w"], p["color_view.query.proj.b"]
        self.key_fc_w, self.key_fc_b = p["color_view.key.fc.w"], p["color_view.key.fc.b"]
        self.color_view_blocks = blocks("color_view")
        self.color_ray_blocks = blocks("color_ray")
        self.color_head_w, self.color_head_b = p["color_head.w"], p["color_head.b"]

    # persistence ------------------------------------------------------

    def save(self, path):
        """Checkpoint: parameter binary plus a JSON sidecar of hyperparameters."""
        self.params.save(path)
        with open(str(path) + ".json", "w") as f:
            json.dump(self.config.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(str(path) + ".json") as f:
            config = ModelConfig(**json.load(f))
        store = T.ParamStore.load(path)
        return cls(config, store=store)

    # conditioning -----------------------------------------------------

    def prepare_sources(self, images, cameras):
        """Extract shared-weight features for a stack of source images."""
        images = np.asarray(images, dtype=np.float64)
        feats = nn.extract_features(images, self.extractor)
        return [SourceView(images[m], T.getitem(feats, m), cameras[m])
                for m in range(len(cameras))]

    def _stacked_features(self, sources):
        # re-stack per-view feature maps into one (V,H,W,C) tensor for gather
        return T.concat([T.reshape(s.features, (1,) + tuple(s.features.shape))
                         for s in sources], axis=0)

    def build_context(self, points, d_tgt, sources):
        """Project a batch of points into every source view and retrieve
        colors, features and source directions (masked when out of frustum)."""
        if len(sources) == 0:
            raise ValueError("at least one source view is required")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        p_count, m_count = pts.shape[0], len(sources)
        d_tgt = np.broadcast_to(np.asarray(d_tgt, dtype=np.float64), (p_count, 3))

        colors = np.zeros((p_count, m_count, 3))
        d_src = np.zeros((p_count, m_count, 3))
        valid = np.zeros((p_count, m_count), dtype=bool)
        us, vs, views = [], [], []
        for m, src in enumerate(sources):
            u, v, _, ok = project_points(pts, src.camera)
            valid[:, m] = ok
            us.append(u)
            vs.append(v)
            views.append(np.full(p_count, m, dtype=np.int64))
            rel = pts - src.camera.t
            norm = np.linalg.norm(rel, axis=-1, keepdims=True)
            d_src[:, m] = np.where(ok[:, None], rel / np.maximum(norm, 1e-12), 0.0)
            # image colors are data, not parameters: sample in plain numpy
            img = src.image
            ui = np.clip(u, 0, img.shape[1] - 1)
            vi = np.clip(v, 0, img.shape[0] - 1)
            x0 = np.minimum(ui.astype(np.int64), img.shape[1] - 2)
            y0 = np.minimum(vi.astype(np.int64), img.shape[0] - 2)
            fx, fy = (ui - x0)[:, None], (vi - y0)[:, None]
            c = ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x0 + 1]
                 + (1 - fx) * fy * img[y0 + 1, x0] + fx * fy * img[y0 + 1, x0 + 1])
            colors[:, m] = np.where(ok[:, None], c, 0.0)

        grids = self._stacked_features(sources)
        feats = T.gather_bilinear(grids, np.concatenate(views), np.concatenate(us),
                                  np.concatenate(vs), valid.T.reshape(-1))
        # (M*P, C) laid out view-major -> (P, M, C)
        feats = T.transpose(T.reshape(feats, (m_count, p_count, self.config.c_feat)),
                            (1, 0, 2))
        return PointContext(pts, d_tgt, colors, feats, d_src, valid)

    # decoders ---------------------------------------------------------

    def build_source_embeddings(self, ctx):
        """Initial per-view tokens: Linear(feature ++ gamma(color) ++ source
        direction ++ direction agreement), zeroed and masked when invalid."""
        cfg = self.config
        dots = np.sum(ctx.d_src * ctx.d_tgt[:, None, :], axis=-1, keepdims=True)
        gamma_c = nn.frequency_embedding(ctx.colors, cfg.freq_levels)
        static = np.where(ctx.valid[..., None],
                          np.concatenate([gamma_c, ctx.d_src, dots], axis=-1), 0.0)
        raw = T.concat([ctx.features, T.constant(static)], axis=-1)
        tokens = T.matmul(raw, self.src_w) + self.src_b
        return tokens * ctx.valid[..., None].astype(np.float64)

    def density_view_decode(self, src_tokens, valid):
        """Self-attention over [query-density token; source tokens].

        Returns the query token (P, d) and per-view tokens (P, M, d); the
        query output is permutation invariant in the sources, the view
        tokens permute equivariantly.
        """
        p_count = src_tokens.shape[0]
        q = T.broadcast_to(self.x0_sigma, (p_count, 1, self.config.d_model))
        x = T.concat([q, src_tokens], axis=1)
        mask = np.concatenate([np.ones((p_count, 1), dtype=bool), valid], axis=1)
        for blk in self.density_view_blocks:
            x = nn.encoder_block(x, blk, key_mask=mask)
        return T.getitem(x, (slice(None), 0)), T.getitem(x, (slice(None), slice(1, None)))

    def _window_index(self, n_samples):
        n = self.config.window_n
        offsets = np.arange(-n, n + 1)
        return np.clip(np.arange(n_samples)[:, None] + offsets, 0, n_samples - 1)

    def _window_pe(self, depths_norm, idx):
        """Constant positional encodings for ray windows: index offset channel
        plus normalized-depth channel (breaks permutation symmetry)."""
        d = self.config.d_model
        win = idx.shape[1]
        index_pe = nn.positional_encoding(win, d)  # (W, d)
        depth_pe = nn.sinusoid_rows(depths_norm[..., idx], d, _DEPTH_PE_SCALE)
        return depth_pe + index_pe

    def _ray_decode(self, reps, depths_norm, blocks):
        """Shared sliding-window attention for the two ray decoders.

        reps: (R, N, d) per-sample representations; returns the center
        token per sample, shape (R, N, d).
        """
        r_count, n_samples, d = reps.shape
        idx = self._window_index(n_samples)
        x = T.take_windows(reps, idx)  # (R, N, W, d)
        x = x + T.constant(self._window_pe(depths_norm, idx))
        x = T.reshape(x, (r_count * n_samples, idx.shape[1], d))
        for blk in blocks:
            x = nn.encoder_block(x, blk)
        center = T.getitem(x, (slice(None), self.config.window_n))
        return T.reshape(center, (r_count, n_samples, d))

    def density_ray_decode(self, sigma0, depths_norm):
        """Windowed self-attention over density reps, then the softplus head.

        sigma0: (R, N, d); returns (sigma_rep (R, N, d), sigma (R, N))."""
        rep = self._ray_decode(sigma0, depths_norm, self.density_ray_blocks)
        sigma = T.softplus(T.matmul(rep, self.sigma_head_w) + self.sigma_head_b)
        return rep, T.getitem(sigma, (Ellipsis, 0))

    def color_view_decode(self, sigma_rep, ctx, src_tokens_out):
        """Cross-attention from the density rep to source keys/values.

        Keys are FC(view token) ++ source direction, values are
        gamma(source color); both stay fixed across blocks."""
        keys_fc = T.matmul(src_tokens_out, self.key_fc_w) + self.key_fc_b
        keys = T.concat([keys_fc, T.constant(ctx.d_src)], axis=-1)
        values = T.constant(nn.frequency_embedding(ctx.colors, self.config.freq_levels))
        y = T.matmul(sigma_rep, self.y0_fc_w) + self.y0_fc_b
        y = T.concat([y, T.constant(ctx.d_tgt)], axis=-1)
        y = T.matmul(y, self.y0_proj_w) + self.y0_proj_b
        y = T.reshape(y, (y.shape[0], 1, self.config.d_model))
        for blk in self.color_view_blocks:
            y = nn.encoder_block(y, blk, cross=(keys, values), key_mask=ctx.valid)
        return T.getitem(y, (slice(None), 0))

    def color_ray_decode(self, color_reps, depths_norm):
        """Windowed self-attention over color reps, then the sigmoid head.

        color_reps: (R, N, d); returns rgb (R, N, 3) in (0, 1)."""
        rep = self._ray_decode(color_reps, depths_norm, self.color_ray_blocks)
        return T.sigmoid(T.matmul(rep, self.color_head_w) + self.color_head_b)

    # full pipeline ----------------------------------------------------

    def query_field(self, points, d_tgt, sources, depths_norm=None):
        """Evaluate (sigma, rgb) for ordered ray samples.

        points: (R, N, 3) or (N, 3); d_tgt: matching (R, 3) or (3,);
        depths_norm: per-sample depths normalized to [0, 1] within the
        scene bounds (defaults to index/N). Returns sigma (R, N) and
        rgb (R, N, 3) as DiffTensors (leading R axis squeezed for 2-D
        ``points``).
        """
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 2
        if squeeze:
            pts = pts[None]
        r_count, n_samples = pts.shape[:2]
        if n_samples == 0:
            raise ValueError("query_field needs at least one sample per ray")
        if depths_norm is None:
            depths_norm = np.broadcast_to(
                (np.arange(n_samples) + 0.5) / n_samples, (r_count, n_samples))
        depths_norm = np.asarray(depths_norm, dtype=np.float64).reshape(r_count, n_samples)
        dirs = np.asarray(d_tgt, dtype=np.float64).reshape(-1, 3)
        dirs_pp = np.repeat(dirs, n_samples, axis=0)

        ctx = self.build_context(pts.reshape(-1, 3), dirs_pp, sources)
        tokens = self.build_source_embeddings(ctx)
        x_sigma, x_src = self.density_view_decode(tokens, ctx.valid)

        d = self.config.d_model
        sigma0 = T.concat([x_sigma, T.constant(ctx.positions)], axis=-1)
        sigma0 = T.matmul(sigma0, self.sigma0_w) + self.sigma0_b
        sigma_rep, sigma = self.density_ray_decode(
            T.reshape(sigma0, (r_count, n_samples, d)), depths_norm)

        y = self.color_view_decode(T.reshape(sigma_rep, (r_count * n_samples, d)),
                                   ctx, x_src)
        rgb = self.color_ray_decode(T.reshape(y, (r_count, n_samples, d)), depths_norm)

        if squeeze:
            return T.getitem(sigma, 0), T.getitem(rgb, 0)
        return sigma, rgb
