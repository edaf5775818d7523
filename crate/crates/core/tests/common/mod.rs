// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

pub mod grad;
pub mod oracle;
