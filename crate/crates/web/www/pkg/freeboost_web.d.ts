/* tslint:disable */
/* eslint-disable */

/**
 * Synthetic 2D dataset plus a model being trained one epoch at a time.
 */
export class DemoSession {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Grad-CAM overlay for test image `index` as RGBA, `side x side` with
     * `side = 7 * upscale`. The first byte after the pixels is the class
     * the map explains.
     */
    gradcam_rgba(index: number, upscale: number): Uint8Array;
    label(index: number): number;
    n_test(): number;
    constructor(variant: string, n_per_class: number, seed: bigint);
    /**
     * Test image `index` as RGBA, `side x side` with `side = 28 * upscale`.
     */
    sample_rgba(index: number, upscale: number): Uint8Array;
    /**
     * Test accuracy and AUC of the current parameters, as JSON.
     */
    test_metrics(): string;
    /**
     * Runs one epoch; returns the epoch record as JSON.
     */
    train_epoch(): string;
}

/**
 * Per-module total/trainable/frozen counts for a vit-tiny classifier, as JSON.
 */
export function accounting(variant: string, d_model: number, d_llm: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demosession_free: (a: number, b: number) => void;
    readonly accounting: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demosession_gradcam_rgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demosession_label: (a: number, b: number) => number;
    readonly demosession_n_test: (a: number) => number;
    readonly demosession_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly demosession_sample_rgba: (a: number, b: number, c: number) => [number, number];
    readonly demosession_test_metrics: (a: number) => [number, number, number, number];
    readonly demosession_train_epoch: (a: number) => [number, number, number, number];
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
