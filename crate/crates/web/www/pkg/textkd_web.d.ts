/* tslint:disable */
/* eslint-disable */

/**
 * A deliberately tiny generator/critic pair trained on user text.
 */
export class DemoTrainer {
    free(): void;
    [Symbol.dispose](): void;
    constructor(corpus: string, mode: string, seed: bigint);
    /**
     * Runs `n` iterations and reports the last losses, the unigram JSD and
     * a handful of samples.
     */
    step(n: number): string;
}

/**
 * Bayes accuracy of the softened geometry, for drawing the curve.
 */
export function softened_bayes_accuracy(radius: number): number;

/**
 * BLEU-{2,3,4} and JSD-{1..4} between two newline-separated corpora.
 * Orders with no n-grams on one side are reported as `null`.
 */
export function text_metrics(candidates: string, references: string, char_level: boolean): string;

/**
 * Trains the three two-word critics. `steps` trades accuracy for page latency.
 */
export function two_word(radius: number, steps: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demotrainer_free: (a: number, b: number) => void;
    readonly demotrainer_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly demotrainer_step: (a: number, b: number) => [number, number, number, number];
    readonly softened_bayes_accuracy: (a: number) => number;
    readonly text_metrics: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly two_word: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
