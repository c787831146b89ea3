//! Student/teacher distributions, the cross-image distillation loss,
//! teacher EMA and centering, parameter schedules, and the optimizer.
//!
//! The teacher only ever changes through `ema_update`; its forward pass
//! runs on detached tensors so no gradient can reach it. The loss sums
//! H(P_t(x), P_s(x')) over teacher views x and student views x' != x,
//! where the student's local views come from the paired image.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;

use crate::backbone::{crops_to_tensor, encode_batch, ParamSet, ViTConfig};
use crate::error::{Error, Result};
use crate::sampling::ViewSet;

pub const DEFAULT_TEACHER_MOMENTUM: f64 = 0.99;
pub const DEFAULT_CENTER_MOMENTUM: f64 = 0.9;
pub const DEFAULT_STUDENT_TEMP: f64 = 0.1;

/// Reference softmax over one logit vector, f64.
fn softmax_vec(scaled: &[f64]) -> Vec<f64> {
    let max = scaled.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// P_s = softmax(logits / temp).
pub fn student_distribution(logits: &[f64], temp: f64) -> Result<Vec<f64>> {
    if temp <= 0.0 {
        return Err(Error::Parameter(format!(
            "student temperature must be positive, got {}",
            temp
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temp).collect();
    Ok(softmax_vec(&scaled))
}

/// P_t = softmax((logits - center) / temp).
pub fn teacher_distribution(logits: &[f64], center: &[f64], temp: f64) -> Result<Vec<f64>> {
    if temp <= 0.0 {
        return Err(Error::Parameter(format!(
            "teacher temperature must be positive, got {}",
            temp
        )));
    }
    if logits.len() != center.len() {
        return Err(Error::Shape(format!(
            "center length {} does not match logits length {}",
            center.len(),
            logits.len()
        )));
    }
    let scaled: Vec<f64> = logits
        .iter()
        .zip(center)
        .map(|(&x, &c)| (x - c) / temp)
        .collect();
    Ok(softmax_vec(&scaled))
}

/// Number of cross-entropy terms: |V_t| * (|V_s| - 1).
pub fn pair_term_count(n_teacher: usize, n_student: usize) -> usize {
    n_teacher * (n_student - 1)
}

/// Reference loss over explicit probability vectors. The first
/// `teacher.len()` student views are identified with the teacher views, so
/// the diagonal (x' = x) is skipped there.
pub fn wsdino_loss_ref(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    wsdino_loss_counted(teacher, student).map(|(loss, _)| loss)
}

/// Reference loss plus the number of cross-entropy terms actually
/// evaluated, counted inside the loop rather than derived from the view
/// multiplicities.
pub fn wsdino_loss_counted(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<(f64, usize)> {
    if teacher.is_empty() || student.len() < teacher.len() {
        return Err(Error::Structure(format!(
            "need teacher views to prefix student views, got {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    let k = teacher[0].len();
    if teacher.iter().chain(student.iter()).any(|v| v.len() != k) {
        return Err(Error::Structure("mismatched distribution lengths".into()));
    }
    let mut loss = 0.0;
    let mut terms = 0usize;
    for (t_idx, p_t) in teacher.iter().enumerate() {
        for (s_idx, p_s) in student.iter().enumerate() {
            if s_idx == t_idx {
                continue;
            }
            for j in 0..k {
                loss -= p_t[j] * p_s[j].max(1e-300).ln();
            }
            terms += 1;
        }
    }
    Ok((loss, terms))
}

/// EMA: theta_t <- lambda * theta_t + (1 - lambda) * theta_s.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, lambda: f64) -> Result<()> {
    for (name, t_var) in &teacher.vars {
        let s_var = student.vars.get(name).ok_or_else(|| {
            Error::Structure(format!("student is missing parameter '{}'", name))
        })?;
        if t_var.as_tensor().dims() != s_var.as_tensor().dims() {
            return Err(Error::Structure(format!(
                "parameter '{}' shapes differ: {:?} vs {:?}",
                name,
                t_var.as_tensor().dims(),
                s_var.as_tensor().dims()
            )));
        }
        let blended = ((t_var.as_tensor().detach() * lambda)?
            + (s_var.as_tensor().detach() * (1.0 - lambda))?)?;
        t_var.set(&blended)?;
    }
    Ok(())
}

/// Center EMA: c <- m * c + (1 - m) * rowmean(batch teacher logits).
pub fn center_update(center: &Var, batch_logits: &Tensor, momentum: f64) -> Result<()> {
    let (rows, _k) = batch_logits.dims2()?;
    if rows == 0 {
        return Err(Error::Structure("empty batch for center update".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Parameter(format!(
            "center momentum must be in [0, 1), got {}",
            momentum
        )));
    }
    let mean = batch_logits.detach().mean(0)?;
    let updated = ((center.as_tensor() * momentum)? + (mean * (1.0 - momentum))?)?;
    center.set(&updated)?;
    Ok(())
}

/// Piecewise schedules: linear warmup then cosine decay for the learning
/// rate; linear warmup then constant for the teacher temperature; constant
/// student temperature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleSpec {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_warmup: usize,
}

impl ScheduleSpec {
    /// Full-scale recipe: warmup to 4e-6 over 10 epochs, cosine to 3e-6 at
    /// epoch 400, teacher temperature 0.04.
    pub fn paper() -> Self {
        Self {
            total_epochs: 400,
            warmup_epochs: 10,
            base_lr: 4e-6,
            final_lr: 3e-6,
            student_temp: DEFAULT_STUDENT_TEMP,
            teacher_temp: 0.04,
            teacher_temp_start: 0.04,
            teacher_temp_warmup: 10,
        }
    }

    /// Desk-scale recipe sized for the small synthetic encoder. The rate
    /// stays low because the toy encoder trains from random init: larger
    /// steps drive the head toward a constant output, where centering turns
    /// the teacher targets uniform and feature quality degrades.
    pub fn toy() -> Self {
        Self {
            total_epochs: 60,
            warmup_epochs: 10,
            base_lr: 1e-4,
            final_lr: 1e-5,
            student_temp: DEFAULT_STUDENT_TEMP,
            teacher_temp: 0.04,
            teacher_temp_start: 0.04,
            teacher_temp_warmup: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_epochs > self.total_epochs {
            return Err(Error::Parameter(
                "warmup must fit within a positive total epoch count".into(),
            ));
        }
        if self.base_lr <= 0.0 || self.final_lr < 0.0 {
            return Err(Error::Parameter("learning rates must be positive".into()));
        }
        if self.student_temp <= 0.0 || self.teacher_temp <= 0.0 || self.teacher_temp_start <= 0.0 {
            return Err(Error::Parameter("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Schedule lookup at a fractional epoch position. Endpoints are exact:
/// lr(warmup) = base_lr, lr(total) = final_lr, teacher temp constant after
/// its warmup.
pub fn schedule_value(
    spec: &ScheduleSpec,
    name: &str,
    epoch: usize,
    step: usize,
    steps_per_epoch: usize,
) -> Result<f64> {
    spec.validate()?;
    let frac = if steps_per_epoch == 0 {
        0.0
    } else {
        step as f64 / steps_per_epoch as f64
    };
    let e = epoch as f64 + frac;
    match name {
        "lr" => {
            let warm = spec.warmup_epochs as f64;
            let total = spec.total_epochs as f64;
            if e < warm {
                Ok(spec.base_lr * e / warm)
            } else if e >= total {
                Ok(spec.final_lr)
            } else if e == warm {
                Ok(spec.base_lr)
            } else {
                let progress = (e - warm) / (total - warm);
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                Ok(spec.final_lr + (spec.base_lr - spec.final_lr) * cosine)
            }
        }
        "teacher_temp" => {
            let warm = spec.teacher_temp_warmup as f64;
            if e >= warm || warm == 0.0 {
                Ok(spec.teacher_temp)
            } else {
                Ok(spec.teacher_temp_start
                    + (spec.teacher_temp - spec.teacher_temp_start) * e / warm)
            }
        }
        "student_temp" => Ok(spec.student_temp),
        other => Err(Error::Parameter(format!("unknown schedule '{}'", other))),
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer with serializable
/// state. Weight decay defaults to zero for this training recipe.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params.vars {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m,
            v,
        })
    }

    /// One update over every parameter with a gradient in the store.
    pub fn step(&mut self, lr: f64, params: &ParamSet, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in &params.vars {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let grad = grad.detach();
            let m = ((&self.m[name] * self.beta1)? + (&grad * (1.0 - self.beta1))?)?;
            let v = ((&self.v[name] * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m * (1.0 / bc1))?;
            let v_hat = (&v * (1.0 / bc2))?;
            let update = (m_hat.broadcast_div(&(v_hat.sqrt()? + self.eps)?)? * lr)?;
            let mut next = (var.as_tensor().detach() - update)?;
            if self.weight_decay > 0.0 {
                next = (next - (var.as_tensor().detach() * (lr * self.weight_decay))?)?;
            }
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    fn export(&self, out: &mut std::collections::HashMap<String, Tensor>) {
        for (name, t) in &self.m {
            out.insert(format!("opt.m.{}", name), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("opt.v.{}", name), t.clone());
        }
    }

    fn import(&mut self, tensors: &std::collections::HashMap<String, Tensor>, t: usize) -> Result<()> {
        for (name, slot) in self.m.iter_mut() {
            let key = format!("opt.m.{}", name);
            *slot = tensors
                .get(&key)
                .ok_or_else(|| Error::Dependency(format!("checkpoint missing '{}'", key)))?
                .clone();
        }
        for (name, slot) in self.v.iter_mut() {
            let key = format!("opt.v.{}", name);
            *slot = tensors
                .get(&key)
                .ok_or_else(|| Error::Dependency(format!("checkpoint missing '{}'", key)))?
                .clone();
        }
        self.t = t;
        Ok(())
    }
}

/// Everything the training loop owns.
pub struct TrainState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub center: Var,
    pub optimizer: AdamW,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub centering: bool,
    pub epoch: usize,
    pub step: usize,
}

/// Checkpoint sidecar: counters plus the configs needed to rebuild state.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub epoch: usize,
    pub step: usize,
    pub optimizer_t: usize,
    pub vit: ViTConfig,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub centering: bool,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl TrainState {
    /// Teacher starts as an exact copy of the student.
    pub fn new(
        config: ViTConfig,
        seed: u64,
        device: &Device,
        dtype: DType,
        teacher_momentum: f64,
        center_momentum: f64,
        centering: bool,
    ) -> Result<Self> {
        let student = ParamSet::init(config, seed, device, dtype)?;
        let teacher = ParamSet::init(config, seed, device, dtype)?;
        let center = Var::from_tensor(&Tensor::zeros(config.head_output, dtype, device)?)?;
        let optimizer = AdamW::new(&student)?;
        Ok(Self {
            student,
            teacher,
            center,
            optimizer,
            teacher_momentum,
            center_momentum,
            centering,
            epoch: 0,
            step: 0,
        })
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            epoch: self.epoch,
            step: self.step,
            optimizer_t: self.optimizer.t,
            vit: self.student.config,
            teacher_momentum: self.teacher_momentum,
            center_momentum: self.center_momentum,
            centering: self.centering,
        }
    }

    pub fn tensor_path(stem: &Path) -> PathBuf {
        stem.with_extension("safetensors")
    }

    pub fn meta_path(stem: &Path) -> PathBuf {
        stem.with_extension("json")
    }

    /// Write `{stem}.safetensors` (all tensors) and `{stem}.json` (meta).
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(parent) = stem.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut tensors = std::collections::HashMap::new();
        for (name, var) in &self.student.vars {
            tensors.insert(format!("student.{}", name), var.as_tensor().clone());
        }
        for (name, var) in &self.teacher.vars {
            tensors.insert(format!("teacher.{}", name), var.as_tensor().clone());
        }
        tensors.insert("center".to_string(), self.center.as_tensor().clone());
        self.optimizer.export(&mut tensors);
        candle_core::safetensors::save(&tensors, Self::tensor_path(stem))?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(Self::meta_path(stem), meta)?;
        Ok(())
    }

    /// Rebuild a full training state from a checkpoint stem.
    pub fn load(stem: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(Self::meta_path(stem))?)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Dependency(format!(
                "checkpoint format {} unsupported (expected {})",
                meta.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let tensors = candle_core::safetensors::load(Self::tensor_path(stem), device)?;
        let mut state = Self::new(
            meta.vit,
            0,
            device,
            dtype,
            meta.teacher_momentum,
            meta.center_momentum,
            meta.centering,
        )?;
        for (name, var) in &state.student.vars {
            let key = format!("student.{}", name);
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Dependency(format!("checkpoint missing '{}'", key)))?;
            var.set(&t.to_dtype(dtype)?)?;
        }
        for (name, var) in &state.teacher.vars {
            let key = format!("teacher.{}", name);
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Dependency(format!("checkpoint missing '{}'", key)))?;
            var.set(&t.to_dtype(dtype)?)?;
        }
        let center = tensors
            .get("center")
            .ok_or_else(|| Error::Dependency("checkpoint missing 'center'".into()))?;
        state.center.set(&center.to_dtype(dtype)?)?;
        state.optimizer.import(&tensors, meta.optimizer_t)?;
        state.epoch = meta.epoch;
        state.step = meta.step;
        Ok(state)
    }
}

/// Per-step outputs the loop logs.
pub struct StepOutcome {
    pub loss: f64,
    pub pair_terms: usize,
}

/// Batched distillation loss for stacked teacher/student outputs.
///
/// `teacher_probs`: [2B, K] rows ordered (pair0 g0, pair0 g1, pair1 g0, ..).
/// `student_global_logp`: same layout. `student_local_logp`: [B*n, K] with
/// pair-major rows. Returns the mean per-pair loss (a sum over that pair's
/// view terms).
fn batched_loss(
    teacher_probs: &Tensor,
    student_global_logp: &Tensor,
    student_local_logp: &Tensor,
    n_pairs: usize,
    n_local: usize,
) -> Result<Tensor> {
    let (rows, k) = teacher_probs.dims2()?;
    if rows != 2 * n_pairs {
        return Err(Error::Structure(format!(
            "expected {} teacher rows, got {}",
            2 * n_pairs,
            rows
        )));
    }
    let t = teacher_probs.reshape((n_pairs, 2, k))?;
    let s_g = student_global_logp.reshape((n_pairs, 2, k))?;
    // Swap the two globals within each pair: teacher g0 meets student g1.
    let s_swapped = Tensor::cat(&[&s_g.narrow(1, 1, 1)?, &s_g.narrow(1, 0, 1)?], 1)?;
    let loss_global = t.broadcast_mul(&s_swapped)?.sum_all()?.neg()?;

    let t_exp = t.reshape((n_pairs, 2, 1, k))?;
    let s_l = student_local_logp.reshape((n_pairs, 1, n_local, k))?;
    let loss_local = t_exp.broadcast_mul(&s_l)?.sum_all()?.neg()?;

    let total = (loss_global + loss_local)?;
    Ok((total / n_pairs as f64)?)
}

/// Forward both networks over a batch of view sets, backpropagate, apply
/// the optimizer, then update teacher and center.
pub fn train_step(
    state: &mut TrainState,
    batch: &[ViewSet],
    lr: f64,
    teacher_temp: f64,
    student_temp: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Structure("empty training batch".into()));
    }
    let n_local = batch[0].locals.len();
    for views in batch {
        if views.globals.len() != 2 || views.locals.len() != n_local {
            return Err(Error::Structure(format!(
                "view multiplicities {}/{} differ from expected 2/{}",
                views.globals.len(),
                views.locals.len(),
                n_local
            )));
        }
    }
    let device = state.student.device.clone();
    let dtype = state.student.dtype;
    let config = state.student.config;

    let global_crops: Vec<&Array2<f32>> = batch
        .iter()
        .flat_map(|v| v.globals.iter())
        .collect();
    let local_crops: Vec<&Array2<f32>> = batch.iter().flat_map(|v| v.locals.iter()).collect();
    let (global_patches, global_grid) = crops_to_tensor(&global_crops, &config, &device, dtype)?;
    let (local_patches, local_grid) = crops_to_tensor(&local_crops, &config, &device, dtype)?;

    // Teacher forward on detached parameters: no graph is built.
    let teacher_params = state.teacher.detached_params();
    let teacher_out = encode_batch(&config, &teacher_params, &global_patches, global_grid, false)?;
    let teacher_logits = teacher_out.head.detach();
    let centered = if state.centering {
        teacher_logits.broadcast_sub(&state.center.as_tensor().detach())?
    } else {
        teacher_logits.clone()
    };
    let teacher_probs =
        candle_nn::ops::softmax(&(centered * (1.0 / teacher_temp))?, D::Minus1)?.detach();

    // Student forward keeps the graph.
    let student_params = state.student.graph_params();
    let student_global =
        encode_batch(&config, &student_params, &global_patches, global_grid, false)?;
    let student_local = encode_batch(&config, &student_params, &local_patches, local_grid, false)?;
    let s_global_logp =
        candle_nn::ops::log_softmax(&(student_global.head * (1.0 / student_temp))?, D::Minus1)?;
    let s_local_logp =
        candle_nn::ops::log_softmax(&(student_local.head * (1.0 / student_temp))?, D::Minus1)?;

    let loss = batched_loss(
        &teacher_probs,
        &s_global_logp,
        &s_local_logp,
        batch.len(),
        n_local,
    )?;
    let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {} at epoch {} step {} (lr {:.3e}, teacher temp {:.3})",
            loss_value, state.epoch, state.step, lr, teacher_temp
        )));
    }

    let grads = loss.backward()?;
    state.optimizer.step(lr, &state.student, &grads)?;
    ema_update(&state.teacher, &state.student, state.teacher_momentum)?;
    if state.centering {
        center_update(&state.center, &teacher_logits, state.center_momentum)?;
    }
    state.step += 1;
    Ok(StepOutcome {
        loss: loss_value,
        pair_terms: pair_term_count(2, 2 + n_local) * batch.len(),
    })
}
