/* tslint:disable */
/* eslint-disable */

/**
 * Materialized Compacter weight (row-major, `n*p` by `n*q`) from random
 * rule matrices and factors.
 */
export function compacter_heatmap(n: number, p: number, q: number, seed: bigint): Float32Array;

/**
 * Learning rate at every step of a linear warmup / linear decay schedule.
 */
export function lr_schedule(total_steps: number, warmup_fraction: number, peak: number): Float64Array;

/**
 * Histograms of one adapter tensor before and after moment-matched
 * resampling, plus the cosine similarity between the two, as JSON.
 */
export function sampled_vs_ported(hidden_dim: number, seed: bigint, bins: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly compacter_heatmap: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly lr_schedule: (a: number, b: number, c: number) => [number, number, number, number];
    readonly sampled_vs_ported: (a: number, b: bigint, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
