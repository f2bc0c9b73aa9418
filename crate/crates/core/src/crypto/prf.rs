use sha2::{Digest, Sha256};

/// Counter-mode keyed PRF: `SHA-256(seed || tag || counter_le)`.
#[derive(Debug, Clone, Copy)]
pub struct Prf {
    seed: [u8; 16],
}

impl Prf {
    pub fn new(seed: [u8; 16]) -> Self {
        Prf { seed }
    }

    pub fn block(&self, tag: &[u8], counter: u64) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update((tag.len() as u32).to_le_bytes());
        h.update(tag);
        h.update(counter.to_le_bytes());
        h.finalize().into()
    }

    pub fn stream<'t>(&self, tag: &'t [u8]) -> PrfStream<'t> {
        PrfStream {
            prf: *self,
            tag,
            counter: 0,
            buf: [0; 32],
            pos: 32,
        }
    }
}

/// Sequential reader over PRF blocks `0, 1, 2, ...` of one domain tag.
#[derive(Debug, Clone)]
pub struct PrfStream<'t> {
    prf: Prf,
    tag: &'t [u8],
    counter: u64,
    buf: [u8; 32],
    pos: usize,
}

impl PrfStream<'_> {
    pub fn next_u64(&mut self) -> u64 {
        if self.pos + 8 > 32 {
            self.buf = self.prf.block(self.tag, self.counter);
            self.counter += 1;
            self.pos = 0;
        }
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.buf[self.pos..self.pos + 8]);
        self.pos += 8;
        u64::from_le_bytes(b)
    }

    /// Uniform integer in `0..bound` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % bound;
            }
        }
    }
}
