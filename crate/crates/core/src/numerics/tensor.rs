//! Dense row-major f32 tensor.
//!
//! Tensors are immutable after creation; the only mutation is gradient
//! accumulation into the shared grad cell during a backward pass, and
//! in-place optimizer updates through [`Tensor::data_mut`] (which copies
//! if the buffer is still shared with a live tape).

use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::rng::DetRng;

/// Shared slot a backward pass deposits gradients into.
pub(crate) type GradCell = Arc<Mutex<Option<Vec<f32>>>>;

/// Identity of a tensor on a specific tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) struct TapeRef {
    pub nonce: u64,
    pub id: usize,
}

/// N-dimensional 32-bit-float array with an optional gradient slot.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f32>>,
    pub(crate) cell: Option<GradCell>,
    pub(crate) node: Option<TapeRef>,
}

impl Tensor {
    /// Build a tensor from a flat row-major buffer; the shape product must
    /// equal the buffer length.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} holds {} elements, buffer has {}", shape, numel, data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(shape_err("from_vec", format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data), cell: None, node: None })
    }

    pub fn from_slice(data: &[f32], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.to_vec(), shape)
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::from_vec(data, &[n]).expect("vector shape always matches")
    }

    /// 0-D tensor (single element, empty shape).
    pub fn scalar(v: f32) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![v]), cell: None, node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; numel]), cell: None, node: None }
    }

    /// Glorot-uniform init with explicit fan-in/fan-out.
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut DetRng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.random_range(-limit..limit)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data), cell: None, node: None }
    }

    /// Mark the tensor as a gradient target (attaches a fresh empty cell).
    pub fn with_grad(mut self) -> Self {
        self.cell = Some(Arc::new(Mutex::new(None)));
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.cell.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.data[0]
    }

    /// Snapshot of the accumulated gradient, if any backward pass deposited one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.cell.as_ref().and_then(|c| c.lock().expect("grad cell poisoned").clone())
    }

    /// Clear the accumulated gradient.
    pub fn zero_grad(&self) {
        if let Some(c) = &self.cell {
            *c.lock().expect("grad cell poisoned") = None;
        }
    }

    /// Stable key identifying this tensor's gradient slot.
    pub(crate) fn grad_key(&self) -> Option<usize> {
        self.cell.as_ref().map(|c| Arc::as_ptr(c) as usize)
    }

    pub(crate) fn data_key(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    /// Mutable access for optimizer updates. Copies if a tape still holds
    /// the buffer; gradients and identity (grad cell) are unaffected.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn from_parts(data: Vec<f32>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), cell: None, node: None }
    }

    /// Same storage, new shape (element counts must match).
    pub(crate) fn view(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} ({} elements) as {:?}", self.shape, self.numel(), shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data), cell: None, node: None })
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field(
                "data",
                &if self.numel() <= 8 {
                    format!("{:?}", &self.data[..])
                } else {
                    format!("[{} elements]", self.numel())
                },
            )
            .finish()
    }
}
